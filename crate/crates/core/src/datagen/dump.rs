//! On-disk dataset dumps: flat little-endian binaries plus a `key = value`
//! manifest.
//!
//! Layout of a dump directory:
//!
//! ```text
//! manifest.txt          key = value lines, sorted by key
//! <set>_images.bin      f64 LE, count x W x H x C, row-major
//! <set>_labels.bin      u64 LE global class indices, one per image
//! ```
//!
//! `<set>` is `train` or an evaluation set name (`base`, `new`, `source`,
//! `target1`, ...).

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::split::{Datasets, DomainBatch, EvalSet, EvalSpec, ProtocolSplit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT: &str = "applenet-dump-v1";

fn io_err(e: io::Error) -> Error {
    Error::Contract(format!("dataset dump I/O: {e}"))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Contract(format!("bad list element {x:?}")))
        })
        .collect()
}

fn write_set(dir: &Path, name: &str, batch: &DomainBatch, m: &mut BTreeMap<String, String>) -> Result<()> {
    let mut img = Vec::with_capacity(batch.images.iter().map(Tensor::len).sum::<usize>() * 8);
    for t in &batch.images {
        for v in t.data() {
            img.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut lab = Vec::with_capacity(batch.labels.len() * 8);
    for &l in &batch.labels {
        lab.extend_from_slice(&(l as u64).to_le_bytes());
    }
    let img_file = format!("{name}_images.bin");
    let lab_file = format!("{name}_labels.bin");
    fs::write(dir.join(&img_file), img).map_err(io_err)?;
    fs::write(dir.join(&lab_file), lab).map_err(io_err)?;
    m.insert(format!("set.{name}.domain"), batch.domain.to_string());
    m.insert(format!("set.{name}.count"), batch.len().to_string());
    m.insert(format!("set.{name}.images"), img_file);
    m.insert(format!("set.{name}.labels"), lab_file);
    Ok(())
}

/// Writes `datasets` and the split bookkeeping under `dir`.
pub fn write_dump(dir: &Path, split: &ProtocolSplit, datasets: &Datasets, shape: [usize; 3]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err)?;
    let mut m = BTreeMap::new();
    m.insert("format".into(), FORMAT.into());
    m.insert("seed".into(), split.seed.to_string());
    m.insert("protocol".into(), split.protocol.to_string());
    m.insert("shots".into(), split.shots.to_string());
    m.insert("image_shape".into(), join(&shape));
    m.insert("class_names".into(), split.class_names.join(","));
    m.insert("seen".into(), join(&split.seen));
    m.insert("unseen".into(), join(&split.unseen));
    m.insert("source_domain".into(), split.source_domain.to_string());
    m.insert("target_domains".into(), join(&split.target_domains));
    for d in &split.domains {
        let k = |f: &str| format!("domain.{}.{f}", d.id);
        m.insert(k("shift"), d.shift.to_string());
        m.insert(k("gain"), join(&d.gain));
        m.insert(k("bias"), join(&d.bias));
        m.insert(k("texture_amplitude"), d.texture_amplitude.to_string());
        m.insert(k("texture_frequency"), d.texture_frequency.to_string());
        m.insert(k("texture_orientation"), d.texture_orientation.to_string());
        m.insert(k("texture_mix"), join(&d.texture_mix));
        m.insert(k("noise"), d.noise.to_string());
    }
    write_set(dir, "train", &datasets.train, &mut m)?;
    let names: Vec<&str> = datasets.evals.iter().map(|e| e.spec.name.as_str()).collect();
    m.insert("eval_sets".into(), names.join(","));
    for e in &datasets.evals {
        m.insert(format!("set.{}.classes", e.spec.name), join(&e.spec.classes));
        write_set(dir, &e.spec.name, &e.data, &mut m)?;
    }
    let mut f = fs::File::create(dir.join(MANIFEST)).map_err(io_err)?;
    for (k, v) in &m {
        writeln!(f, "{k} = {v}").map_err(io_err)?;
    }
    Ok(())
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Contract(format!("manifest line {}: missing '='", i + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDump {
    pub manifest: BTreeMap<String, String>,
    pub shape: [usize; 3],
    pub datasets: Datasets,
}

fn get<'a>(m: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
    m.get(k)
        .map(String::as_str)
        .ok_or_else(|| Error::Contract(format!("manifest missing key {k:?}")))
}

fn read_set(dir: &Path, name: &str, m: &BTreeMap<String, String>, shape: [usize; 3]) -> Result<DomainBatch> {
    let count: usize = get(m, &format!("set.{name}.count"))?
        .parse()
        .map_err(|_| Error::Contract("bad count".into()))?;
    let domain: usize = get(m, &format!("set.{name}.domain"))?
        .parse()
        .map_err(|_| Error::Contract("bad domain".into()))?;
    let img = fs::read(dir.join(get(m, &format!("set.{name}.images"))?)).map_err(io_err)?;
    let lab = fs::read(dir.join(get(m, &format!("set.{name}.labels"))?)).map_err(io_err)?;
    let per = shape.iter().product::<usize>();
    if img.len() != count * per * 8 || lab.len() != count * 8 {
        return Err(Error::Contract(format!("set {name}: file sizes disagree with count {count}")));
    }
    let values: Vec<f64> = img
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let images = values
        .chunks_exact(per)
        .map(|c| Tensor::new(&shape, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels = lab
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    Ok(DomainBatch { domain, images, labels })
}

pub fn read_dump(dir: &Path) -> Result<LoadedDump> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(io_err)?;
    let m = parse_manifest(&text)?;
    if get(&m, "format")? != FORMAT {
        return Err(Error::Contract(format!("unsupported dump format {:?}", m["format"])));
    }
    let dims: Vec<usize> = parse_list(get(&m, "image_shape")?)?;
    let shape: [usize; 3] = dims
        .try_into()
        .map_err(|_| Error::Contract("image_shape must have three extents".into()))?;
    let train = read_set(dir, "train", &m, shape)?;
    let mut evals = Vec::new();
    for name in get(&m, "eval_sets")?.split(',').filter(|s| !s.is_empty()) {
        let data = read_set(dir, name, &m, shape)?;
        let classes = parse_list(get(&m, &format!("set.{name}.classes"))?)?;
        evals.push(EvalSet {
            spec: EvalSpec { name: name.to_string(), domain: data.domain, classes },
            data,
        });
    }
    Ok(LoadedDump { manifest: m, shape, datasets: Datasets { train, evals } })
}
