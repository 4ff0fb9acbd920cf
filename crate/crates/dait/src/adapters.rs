//! Registry for external VLM towers. Nothing is registered by default;
//! selecting an unregistered adapter is a backend error, never a silent
//! fallback to the toy encoders.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use dait_core::encoders::{ImageBackbone, TextBackbone};

use crate::error::{DaitError, Result};

pub type ImageFactory = fn(input_dims: [usize; 3]) -> Result<Box<dyn ImageBackbone>>;
pub type TextFactory = fn() -> Result<Box<dyn TextBackbone>>;

#[derive(Default)]
struct Registry {
    image: BTreeMap<String, ImageFactory>,
    text: BTreeMap<String, TextFactory>,
}

fn registry() -> &'static Mutex<Registry> {
    static R: OnceLock<Mutex<Registry>> = OnceLock::new();
    R.get_or_init(Default::default)
}

pub fn register_image(name: &str, factory: ImageFactory) {
    registry().lock().unwrap().image.insert(name.to_string(), factory);
}

pub fn register_text(name: &str, factory: TextFactory) {
    registry().lock().unwrap().text.insert(name.to_string(), factory);
}

fn missing(role: &str, name: Option<&str>) -> DaitError {
    match name {
        Some(n) => DaitError::Backend(format!("no {role} adapter named `{n}` is registered")),
        None => DaitError::Backend(format!("{role} kind is external_adapter but no adapter name is set")),
    }
}

pub fn image(name: Option<&str>, input_dims: [usize; 3]) -> Result<Box<dyn ImageBackbone>> {
    let f = name.and_then(|n| registry().lock().unwrap().image.get(n).copied());
    f.ok_or_else(|| missing("image", name))?(input_dims)
}

pub fn text(name: Option<&str>) -> Result<Box<dyn TextBackbone>> {
    let f = name.and_then(|n| registry().lock().unwrap().text.get(n).copied());
    f.ok_or_else(|| missing("text", name))?()
}
