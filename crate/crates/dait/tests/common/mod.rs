#![allow(dead_code)]

use std::path::Path;

use dait::config::{resolve, RunConfig};

pub fn toml_str(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

/// A small, fast configuration on the synthetic fixture.
pub fn tiny(out: &Path, extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "epochs=2",
        "batch_size=16",
        "optimizer.lr=1e-3",
        "data.image_side=16",
        "data.synthetic.image_side=16",
        "data.synthetic.per_class=10",
        "encoders.embed_dim=16",
        "encoders.projection.epochs=20",
        "encoders.projection.hidden=32",
        "encoders.vlm_image.raw_dim=32",
        "encoders.intermediate.channels=[8,8]",
        "encoders.intermediate.strides=[2,1]",
        "encoders.student.channels=[4]",
        "encoders.student.strides=[2]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    sets.push(format!("out_dir={}", toml_str(out)));
    sets.extend(extra.iter().map(|s| s.to_string()));
    resolve("", &sets).unwrap()
}
