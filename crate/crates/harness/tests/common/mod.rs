#![allow(dead_code)]

use equidp_harness::config::Config;

/// Tiny D4 model on 16-pixel synthetic images.
pub const TINY: &str = r#"
[group]
kind = "dihedral"
rotation_order = 4

[model]
reference_widths = [4, 4, 8]
num_classes = 4

[optimizer]
learning_rate = 1.0
batch_expected = 16
clip_norm = 1.0
noise_multiplier = 1.0
num_updates = 3
ema_decay = 0.5

[dataset]
source = "synthetic"
train_size = 48
test_size = 16
image_size = 16
seed = 3

[privacy]
delta = 1e-5

[run]
seed = 5
log_interval = 1
deterministic = true
"#;

pub fn tiny(overrides: &[&str]) -> Config {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::with_overrides(TINY, &o).unwrap()
}
