//! Dataset directory: `manifest.tsv`, `images/<id>.bin`, `masks/<id>.bin`.
//!
//! Grid files are `EGI1` magic, height and width as little-endian `u32`,
//! then `H·W` little-endian `f64` values. The manifest records a SHA-256 of
//! every grid file.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Dataset, DatasetSpec, LesionKind, PoolState, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::explain::ExpertMask;
use crate::numeric::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EGI1";
const COLUMNS: &str = "id\tlabel\tsplit\tlesion\ttag\timage_sha256\tmask_sha256";

fn encode_grid(h: usize, w: usize, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_grid(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "bad magic bytes".into(),
        });
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < 8 * h * w {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    if body.len() > 8 * h * w || h == 0 || w == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} payload bytes for a {h}x{w} grid", body.len()),
        });
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((h, w, values))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn spec_fields(spec: &DatasetSpec) -> Vec<(&'static str, String)> {
    vec![
        ("num_classes", spec.num_classes.to_string()),
        ("image_size", spec.image_size.to_string()),
        ("pool", spec.pool.to_string()),
        ("seed_set", spec.seed_set.to_string()),
        ("test", spec.test.to_string()),
        ("noise", spec.noise.to_string()),
        ("stamp_tags", spec.stamp_tags.to_string()),
        ("shortcut_rate", spec.shortcut_rate.to_string()),
        ("test_shortcut_rate", spec.test_shortcut_rate.to_string()),
        ("faint_rate", spec.faint_rate.to_string()),
        ("seed", spec.seed.to_string()),
    ]
}

/// Write the dataset and its split assignment to `dir`.
pub fn save(dataset: &Dataset, state: &PoolState, dir: &Path) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = format!("#egal-dataset\tversion={MANIFEST_VERSION}\n#spec");
    for (k, v) in spec_fields(&dataset.spec) {
        write!(manifest, "\t{k}={v}").expect("string write");
    }
    manifest.push('\n');
    manifest.push_str(COLUMNS);
    manifest.push('\n');
    for s in &dataset.samples {
        let split = if state.labeled.contains(&s.id) {
            "seed"
        } else if state.test.contains(&s.id) {
            "test"
        } else {
            "pool"
        };
        let (h, w) = (s.height(), s.width());
        let img = encode_grid(h, w, s.image.data());
        let esm = s
            .esm
            .as_ref()
            .ok_or_else(|| Error::contract(format!("sample {} has no mask to save", s.id)))?;
        let mask = encode_grid(h, w, esm.grid().data());
        write_file(&dir.join("images").join(format!("{}.bin", s.id)), &img)?;
        write_file(&dir.join("masks").join(format!("{}.bin", s.id)), &mask)?;
        let label = s.label.map_or("-".to_string(), |l| l.to_string());
        let tag = s.provenance.tag.map_or("-".to_string(), |t| t.to_string());
        writeln!(
            manifest,
            "{}\t{label}\t{split}\t{}\t{tag}\t{}\t{}",
            s.id,
            s.provenance.lesion.as_str(),
            sha256_hex(&img),
            sha256_hex(&mask)
        )
        .expect("string write");
    }
    write_file(&dir.join("manifest.tsv"), manifest.as_bytes())
}

fn parse_spec(path: &Path, line: &str) -> Result<DatasetSpec> {
    let mut fields = line.split('\t');
    if fields.next() != Some("#spec") {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: "missing #spec line".into(),
        });
    }
    let mut spec = DatasetSpec::default();
    let mut seen = BTreeSet::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: format!("malformed spec field {f:?}"),
        })?;
        let bad = || Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad value for {k}: {v:?}"),
        };
        match k {
            "num_classes" => spec.num_classes = v.parse().map_err(|_| bad())?,
            "image_size" => spec.image_size = v.parse().map_err(|_| bad())?,
            "pool" => spec.pool = v.parse().map_err(|_| bad())?,
            "seed_set" => spec.seed_set = v.parse().map_err(|_| bad())?,
            "test" => spec.test = v.parse().map_err(|_| bad())?,
            "noise" => spec.noise = v.parse().map_err(|_| bad())?,
            "stamp_tags" => spec.stamp_tags = v.parse().map_err(|_| bad())?,
            "shortcut_rate" => spec.shortcut_rate = v.parse().map_err(|_| bad())?,
            "test_shortcut_rate" => spec.test_shortcut_rate = v.parse().map_err(|_| bad())?,
            "faint_rate" => spec.faint_rate = v.parse().map_err(|_| bad())?,
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            other => {
                return Err(Error::Version(format!(
                    "{}: unknown manifest field {other:?} for version {MANIFEST_VERSION}",
                    path.display()
                )))
            }
        }
        seen.insert(k.to_string());
    }
    if seen.len() != spec_fields(&spec).len() {
        return Err(Error::Version(format!("{}: incomplete #spec line", path.display())));
    }
    Ok(spec)
}

fn read_grid(path: PathBuf, checksum: &str) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != checksum {
        // a short file is reported as truncated rather than as a checksum failure
        if let Err(e @ Error::Truncated(_)) = decode_grid(&path, &bytes) {
            return Err(e);
        }
        return Err(Error::Checksum(path));
    }
    decode_grid(&path, &bytes)
}

/// Read a directory written by [`save`].
pub fn load(dir: &Path) -> Result<(Dataset, PoolState)> {
    let mpath = dir.join("manifest.tsv");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let version = header
        .strip_prefix("#egal-dataset\tversion=")
        .ok_or_else(|| Error::Version(format!("{}: missing dataset header", mpath.display())))?;
    if version != MANIFEST_VERSION.to_string() {
        return Err(Error::Version(format!(
            "{}: manifest version {version}, expected {MANIFEST_VERSION}",
            mpath.display()
        )));
    }
    let spec = parse_spec(&mpath, lines.next().unwrap_or_default())?;
    let columns = lines.next().unwrap_or_default();
    if columns != COLUMNS {
        return Err(Error::Version(format!("{}: unexpected columns {columns:?}", mpath.display())));
    }
    let fmt = |detail: String| Error::Format {
        path: mpath.clone(),
        detail,
    };
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    let (mut labeled, mut pool, mut test) = (BTreeSet::new(), BTreeSet::new(), BTreeSet::new());
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(fmt(format!("row {row}: expected 7 columns, got {}", cols.len())));
        }
        let id: usize = cols[0].parse().map_err(|_| fmt(format!("row {row}: bad id")))?;
        if id != samples.len() {
            return Err(fmt(format!("row {row}: ids must be dense and ordered, got {id}")));
        }
        let opt = |s: &str| -> Result<Option<usize>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| fmt(format!("row {row}: bad integer {s:?}")))
            }
        };
        let label = opt(cols[1])?;
        let split = Split::parse(cols[2]).ok_or_else(|| fmt(format!("row {row}: bad split {:?}", cols[2])))?;
        let lesion =
            LesionKind::parse(cols[3]).ok_or_else(|| fmt(format!("row {row}: bad lesion {:?}", cols[3])))?;
        let tag = opt(cols[4])?;
        let (h, w, img) = read_grid(dir.join("images").join(format!("{id}.bin")), cols[5])?;
        let (mh, mw, mask) = read_grid(dir.join("masks").join(format!("{id}.bin")), cols[6])?;
        if (mh, mw) != (h, w) {
            return Err(fmt(format!("row {row}: mask {mh}x{mw} does not match image {h}x{w}")));
        }
        match split {
            Split::Seed => labeled.insert(id),
            Split::Pool => pool.insert(id),
            Split::Test => test.insert(id),
        };
        splits.push(if split == Split::Test { Split::Test } else { Split::Pool });
        samples.push(Sample {
            id,
            image: Tensor::new(&[1, h, w], img)?,
            label,
            esm: Some(ExpertMask::new(Tensor::new(&[h, w], mask)?)?),
            provenance: Provenance { lesion, tag },
        });
    }
    let state = PoolState::new(labeled, pool, test)?;
    Ok((Dataset { spec, samples, splits }, state))
}
