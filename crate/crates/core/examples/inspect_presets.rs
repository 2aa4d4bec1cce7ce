//! Per-module parameter counts of the model presets.
//!
//! ```text
//! cargo run --release --example inspect_presets
//! ```

use ctal::model::{count_parameters, ModelConfig};

fn main() {
    for (name, cfg) in [
        ("base", ModelConfig::base()),
        ("large", ModelConfig::large()),
        ("tiny", ModelConfig::tiny(1000)),
    ] {
        let count = count_parameters(&cfg);
        println!(
            "{name}: {} layers, hidden {}, {} heads, ffn {}, vocab {}",
            cfg.layers, cfg.hidden, cfg.heads, cfg.ffn_dim, cfg.vocab_size
        );
        for (module, n) in &count.per_module {
            println!("  {module:16} {n:>12}");
        }
        println!("  {:16} {:>12} ({:.1}M)", "total", count.total, count.total as f64 / 1e6);
    }
}
