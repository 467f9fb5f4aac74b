#![allow(dead_code)]

use std::path::Path;

use xlab::config::ExperimentConfig;

/// A configuration small enough to run end to end in a few seconds.
pub fn tiny_toml(id: &str, out: &Path, adversarial: bool) -> String {
    let (techniques, epsilons) = if adversarial {
        ("[\"pgd\"]", "[0.1]")
    } else {
        ("[]", "[]")
    };
    format!(
        r#"
id = "{id}"
out_dir = "{out}"
seeds = [0]

[victim_data]
kind = "synthetic"
num_classes = 3
train_per_class = 20
test_per_class = 10

[pool]
kind = "synthetic"
templates = 20
per_template = 10

[victim]
architecture = "cnn-small"

[victim.train]
max_epochs = 2
decay_every = 1

[adversarial]
techniques = {techniques}
epsilons = {epsilons}

[extraction]
budgets = [50, 100]

[extraction.surrogate]
architecture = "mlp-wide"

[extraction.surrogate.train]
max_epochs = 2
decay_every = 1
label_mode = "soft"

[metrics]
techniques = ["fgsm"]
epsilons = [0.1]
grid_samples = 12
"#,
        out = out.display()
    )
}

pub fn tiny(id: &str, out: &Path, adversarial: bool) -> ExperimentConfig {
    ExperimentConfig::from_toml(&tiny_toml(id, out, adversarial)).unwrap()
}
