//! Checkpoints: one `EGRAF1` feature file per tensor plus a text manifest
//! with lines `name file rows cols`.

use std::fs;
use std::path::Path;

use crate::error::{EgraError, Result};
use crate::features::{load_matrix, save_matrix};
use crate::model::ModelState;

pub const MANIFEST: &str = "manifest.txt";

pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EgraError::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in state.named_tensors() {
        let file = format!("{name}.bin");
        save_matrix(&dir.join(&file), &t.mapv(|v| v as f32))?;
        manifest.push_str(&format!("{name} {file} {} {}\n", t.nrows(), t.ncols()));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| EgraError::io(&path, e))
}

/// Loads tensors into a copy of `template`, which fixes names and shapes.
pub fn load_checkpoint(dir: &Path, template: &ModelState) -> Result<ModelState> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| EgraError::io(&path, e))?;
    let mut state = template.clone();
    let names: Vec<(String, (usize, usize))> = template
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dim()))
        .collect();
    let mut seen = vec![false; names.len()];
    for (line_no, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        let [name, file, ..] = cols[..] else {
            return Err(EgraError::Parse {
                path: path.clone(),
                line: line_no + 1,
                msg: "expected 'name file rows cols'".into(),
            });
        };
        let Some(idx) = names.iter().position(|(n, _)| n == name) else {
            return Err(EgraError::Data(format!("checkpoint has unknown tensor '{name}'")));
        };
        let m = load_matrix(&dir.join(file))?;
        if m.dim() != names[idx].1 {
            return Err(EgraError::Shape(format!(
                "tensor '{name}' is {:?}, expected {:?}",
                m.dim(),
                names[idx].1
            )));
        }
        let dst = &mut state.tensors_mut()[idx];
        for (d, s) in dst.iter_mut().zip(m.iter()) {
            *d = *s as f64;
        }
        seen[idx] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        return Err(EgraError::Data(format!("checkpoint is missing tensor '{}'", names[k].0)));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_at_f32_precision() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let state = ModelState::init(5, 3, &[4, 2], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let back = load_checkpoint(dir.path(), &state.zeros_like()).unwrap();
        for (a, b) in state.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let other = ModelState::init(5, 3, &[4], &mut rng);
        assert!(load_checkpoint(dir.path(), &other).is_err());
    }
}
