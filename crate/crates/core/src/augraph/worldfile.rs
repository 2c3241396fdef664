//! World CSV format.
//!
//! Three row kinds, tagged by the first column, in this order:
//!
//! ```text
//! natural,<id>,<prob>
//! kernel,<natural_id>,<aug_id>,<prob>      (zero entries omitted)
//! aug,<id>,<label>,<f0>,...,<f{D-1}>
//! ```
//!
//! UTF-8, LF line endings. Floats are written in shortest round-trip form, so
//! writing is byte-deterministic and reading is lossless.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::AugmentationWorld;

pub fn write_world(path: &Path, world: &AugmentationWorld<f64>) -> Result<()> {
    let mut out = String::new();
    for (id, p) in world.natural_probs.iter().enumerate() {
        out.push_str(&format!("natural,{id},{p}\n"));
    }
    for b in 0..world.n_natural() {
        for x in 0..world.n_aug() {
            let p = world.kernel.at2(b, x);
            if p != 0.0 {
                out.push_str(&format!("kernel,{b},{x},{p}\n"));
            }
        }
    }
    for x in 0..world.n_aug() {
        out.push_str(&format!("aug,{x},{}", world.labels[x]));
        for v in world.features.row(x) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<AugmentationWorld<f64>> {
    let text = fs::read_to_string(path)?;
    let mut probs: Vec<(usize, f64)> = Vec::new();
    let mut kernel_entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut augs: Vec<(usize, usize, Vec<f64>)> = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::Parse(format!("line {}: {what}: {line}", lineno + 1));
        match fields[0] {
            "natural" => {
                if fields.len() != 3 {
                    return Err(bad("natural row wants 3 fields"));
                }
                let id = fields[1].parse().map_err(|_| bad("bad natural id"))?;
                let p = fields[2].parse().map_err(|_| bad("bad probability"))?;
                probs.push((id, p));
            }
            "kernel" => {
                if fields.len() != 4 {
                    return Err(bad("kernel row wants 4 fields"));
                }
                let b = fields[1].parse().map_err(|_| bad("bad natural id"))?;
                let x = fields[2].parse().map_err(|_| bad("bad aug id"))?;
                let p = fields[3].parse().map_err(|_| bad("bad probability"))?;
                kernel_entries.push((b, x, p));
            }
            "aug" => {
                if fields.len() < 4 {
                    return Err(bad("aug row wants at least 4 fields"));
                }
                let id = fields[1].parse().map_err(|_| bad("bad aug id"))?;
                let label = fields[2].parse().map_err(|_| bad("bad label"))?;
                let feats = fields[3..]
                    .iter()
                    .map(|f| f.parse().map_err(|_| bad("bad feature value")))
                    .collect::<Result<Vec<f64>>>()?;
                augs.push((id, label, feats));
            }
            other => return Err(bad(&format!("unknown section tag '{other}'"))),
        }
    }

    if probs.is_empty() || augs.is_empty() {
        return Err(Error::Parse("world file lacks natural or aug rows".into()));
    }
    let n_natural = probs.iter().map(|&(id, _)| id).max().unwrap() + 1;
    let n_aug = augs.iter().map(|&(id, _, _)| id).max().unwrap() + 1;
    if probs.len() != n_natural || augs.len() != n_aug {
        return Err(Error::Parse("non-contiguous ids in world file".into()));
    }
    let dim = augs[0].2.len();

    let mut natural_probs = vec![0.0; n_natural];
    for (id, p) in probs {
        natural_probs[id] = p;
    }
    let mut kernel = Tensor::zeros(vec![n_natural, n_aug]);
    for (b, x, p) in kernel_entries {
        if b >= n_natural || x >= n_aug {
            return Err(Error::Parse(format!("kernel entry ({b}, {x}) out of range")));
        }
        kernel.set2(b, x, p);
    }
    let mut features = Tensor::zeros(vec![n_aug, dim]);
    let mut labels = vec![0usize; n_aug];
    for (id, label, feats) in augs {
        if feats.len() != dim {
            return Err(Error::Parse(format!("aug {id} has {} features, expected {dim}", feats.len())));
        }
        labels[id] = label;
        for (j, v) in feats.into_iter().enumerate() {
            features.set2(id, j, v);
        }
    }

    AugmentationWorld::new(natural_probs, kernel, features, labels)
        .map_err(|e| Error::Parse(format!("world file violates invariants: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_random_world;

    #[test]
    fn roundtrip_is_lossless_and_deterministic() {
        let world = make_random_world(4, 7, 3, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("w1.csv");
        let p2 = dir.path().join("w2.csv");
        write_world(&p1, &world).unwrap();
        let back = read_world(&p1).unwrap();
        assert_eq!(back.natural_probs, world.natural_probs);
        assert_eq!(back.kernel, world.kernel);
        assert_eq!(back.features, world.features);
        assert_eq!(back.labels, world.labels);
        write_world(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "natural,0,1.0\nbogus,1,2\n").unwrap();
        assert!(matches!(read_world(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn rejects_invalid_world() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        // Kernel row does not sum to 1.
        std::fs::write(&p, "natural,0,1.0\nkernel,0,0,0.25\naug,0,0,1.5\n").unwrap();
        assert!(matches!(read_world(&p), Err(Error::Parse(_))));
    }
}
