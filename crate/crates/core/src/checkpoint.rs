//! Parameter files.
//!
//! `<name>.bin` holds every value as little-endian f64, back to back.
//! `<name>.manifest` lists one tensor per line as `name shape offset`, the
//! shape written `d0xd1x...` and the offset counted in values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("manifest")
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn fail(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save(store: &ParamStore, bin: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(store.num_values() * 8);
    let mut manifest = String::new();
    for (_, p) in store.iter() {
        writeln!(manifest, "{} {} {}", p.name, shape_text(p.value.shape()), bytes.len() / 8).expect("string write");
        p.value.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    }
    std::fs::write(bin, &bytes).map_err(|e| Error::io(bin, e))?;
    let mp = manifest_path(bin);
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
}

fn parse_manifest(path: &Path, text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: &str| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, offset] = f[..] else {
            return Err(bad("expected `name shape offset`"));
        };
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("malformed shape"))?;
        let offset = offset.parse().map_err(|_| bad("malformed offset"))?;
        if out.insert(name.to_string(), Entry { shape, offset }).is_some() {
            return Err(bad("duplicate tensor name"));
        }
    }
    Ok(out)
}

/// Fills every parameter of `store` from disk. Names and shapes must agree
/// exactly; all disagreements are listed in the error.
pub fn load(store: &mut ParamStore, bin: &Path) -> Result<()> {
    let mp = manifest_path(bin);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let entries = parse_manifest(&mp, &text)?;
    let bytes = std::fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(fail(bin, format!("length {} is not a whole number of values", bytes.len())));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

    let mut problems = Vec::new();
    for (_, p) in store.iter() {
        match entries.get(&p.name) {
            None => problems.push(format!("`{}` missing from file", p.name)),
            Some(e) if e.shape != p.value.shape() => problems.push(format!(
                "`{}` has shape {} in file, model expects {}",
                p.name,
                shape_text(&e.shape),
                shape_text(p.value.shape())
            )),
            Some(e) if e.offset + p.value.len() > values.len() => problems.push(format!("`{}` runs past the end of the data", p.name)),
            Some(_) => {}
        }
    }
    for name in entries.keys().filter(|n| store.id(n).is_none()) {
        problems.push(format!("`{name}` in file is not a model parameter"));
    }
    if !problems.is_empty() {
        return Err(fail(bin, problems.join("; ")));
    }

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let e = &entries[&p.name];
        let n = p.value.len();
        p.value = Tensor::new(&e.shape, values[e.offset..e.offset + n].to_vec())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, (name, shape)) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|k| (k as f64 + 0.25) * (i as f64 + 1.0) - 3.0).collect();
            s.insert(*name, Tensor::new(shape, data).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let mut a = store(&[("w", &[3, 4]), ("b", &[4])]);
        a.get_mut(a.id("b").unwrap()).value.data_mut()[2] = f64::MIN_POSITIVE / 3.0;
        save(&a, &path).unwrap();
        let mut b = store(&[("w", &[3, 4]), ("b", &[4])]);
        b.get_mut(b.id("w").unwrap()).value.data_mut().fill(0.0);
        load(&mut b, &path).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(b.iter()) {
            assert_eq!(x.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert!(manifest.contains("w 3x4 0"), "{manifest}");
        assert!(manifest.contains("b 4 12"), "{manifest}");
    }

    #[test]
    fn mismatches_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&store(&[("w", &[3, 4]), ("extra", &[2])]), &path).unwrap();
        let mut other = store(&[("w", &[4, 3]), ("gone", &[1])]);
        let e = load(&mut other, &path).unwrap_err().to_string();
        assert!(e.contains("`w` has shape 3x4 in file, model expects 4x3"), "{e}");
        assert!(e.contains("`gone` missing"), "{e}");
        assert!(e.contains("`extra` in file"), "{e}");
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&store(&[("w", &[3, 4])]), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        let e = load(&mut store(&[("w", &[3, 4])]), &path).unwrap_err();
        assert!(e.to_string().contains("past the end"), "{e}");
        std::fs::write(&path, &bytes[..5]).unwrap();
        assert!(load(&mut store(&[("w", &[3, 4])]), &path).is_err());
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let e = load(&mut store(&[("w", &[1])]), &dir.path().join("none.bin")).unwrap_err();
        assert!(e.is_io());
    }
}
