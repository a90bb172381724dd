//! Representative-input directories: `inputs.json` plus one raw f32 blob per sample.
//!
//! ```json
//! { "shape": [16, 16, 3], "files": ["x0.bin", "x1.bin"] }
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use wes_core::model::{read_blob, write_blob};
use wes_core::tensor::{Layout, Tensor};

pub const INPUTS_FILE: &str = "inputs.json";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct InputsDoc {
    shape: [usize; 3],
    files: Vec<String>,
}

pub fn load_inputs(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let manifest = dir.join(INPUTS_FILE);
    if !manifest.is_file() {
        bail!("no representative data at {} (expected {INPUTS_FILE})", dir.display());
    }
    let text = fs::read_to_string(&manifest)
        .with_context(|| format!("reading {}", manifest.display()))?;
    let doc: InputsDoc = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest.display()))?;
    if doc.files.is_empty() {
        bail!("{} lists no inputs", manifest.display());
    }
    doc.files
        .iter()
        .map(|f| {
            read_blob(&dir.join(f), doc.shape.to_vec(), Layout::Nhwc)
                .with_context(|| format!("loading input {f}"))
        })
        .collect()
}

pub fn save_inputs(dir: &Path, inputs: &[Tensor<f32>]) -> Result<()> {
    let Some(first) = inputs.first() else {
        bail!("no inputs to save");
    };
    let shape: [usize; 3] = first
        .shape()
        .try_into()
        .context("inputs must have shape [h, w, c]")?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let name = format!("x{i}.bin");
        write_blob(&dir.join(&name), x)?;
        files.push(name);
    }
    let doc = serde_json::to_string_pretty(&InputsDoc { shape, files })?;
    fs::write(dir.join(INPUTS_FILE), doc)?;
    Ok(())
}
