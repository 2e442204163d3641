//! Binary checkpoints: architecture, head mode and named tensors.
//!
//! Layout (all integers u32 little-endian, values f64 little-endian):
//! magic `EGALCKPT`, version, head mode byte, in_channels, kernel,
//! embed_dim, num_classes, width count, widths, tensor count, then per
//! tensor its name length, name bytes, rank, extents and values.
//! Prototypes are stored as tensors named `prototype.{k}`.

use std::path::Path;

use super::cnn::{Architecture, Param, SmallCnn};
use super::head::{Classifier, Head, HeadMode, PrototypeSet};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAGIC: &[u8; 8] = b"EGALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PROTOTYPE_PREFIX: &str = "prototype.";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(classifier: &Classifier) -> Vec<u8> {
    let arch = classifier.net.architecture();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match classifier.head.mode() {
        HeadMode::Linear => 0,
        HeadMode::Prototypical => 1,
    });
    for v in [arch.in_channels, arch.kernel, arch.embed_dim, arch.num_classes, arch.widths.len()] {
        put_u32(&mut out, v);
    }
    for &w in &arch.widths {
        put_u32(&mut out, w);
    }
    let protos: Vec<(String, Tensor)> = match &classifier.head {
        Head::Linear => Vec::new(),
        Head::Prototypical(set) => set
            .classes()
            .map(|k| {
                let c = set.get(k).expect("listed class").to_vec();
                (format!("{PROTOTYPE_PREFIX}{k}"), Tensor::vector(c))
            })
            .collect(),
    };
    put_u32(&mut out, classifier.net.params().len() + protos.len());
    for p in classifier.net.params() {
        put_tensor(&mut out, &p.name, &p.value);
    }
    for (name, t) in &protos {
        put_tensor(&mut out, name, t);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Version("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Version("tensor name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Version("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Classifier> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Version("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mode = match r.take(1)?[0] {
        0 => HeadMode::Linear,
        1 => HeadMode::Prototypical,
        m => return Err(Error::Version(format!("unknown head mode byte {m}"))),
    };
    let in_channels = r.u32()?;
    let kernel = r.u32()?;
    let embed_dim = r.u32()?;
    let num_classes = r.u32()?;
    let depth = r.u32()?;
    let widths = (0..depth).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        in_channels,
        widths,
        kernel,
        embed_dim,
        num_classes,
    };
    let count = r.u32()?;
    let mut params = Vec::new();
    let mut protos = PrototypeSet::new();
    for _ in 0..count {
        let (name, value) = r.tensor()?;
        if let Some(k) = name.strip_prefix(PROTOTYPE_PREFIX) {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Version(format!("bad prototype tensor name {name:?}")))?;
            protos.insert(k, value.into_data());
        } else {
            params.push(Param { name, value });
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Version("trailing bytes after checkpoint".into()));
    }
    let net = SmallCnn::from_params(arch, params)?;
    let head = match mode {
        HeadMode::Linear => Head::Linear,
        HeadMode::Prototypical => Head::Prototypical(protos),
    };
    Ok(Classifier::new(net, head))
}

pub fn save_checkpoint(classifier: &Classifier, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(classifier)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proto_classifier() -> Classifier {
        let net = SmallCnn::new(Architecture::default(), 7).unwrap();
        let mut set = PrototypeSet::new();
        for k in 0..3 {
            set.insert(k, (0..64).map(|i| (i as f64 * 0.1 + k as f64).sin() / 3.0).collect());
        }
        Classifier::new(net, Head::Prototypical(set))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = proto_classifier();
        let bytes = to_bytes(&c);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(to_bytes(&back), bytes);
        let img = Tensor::filled(&[1, 16, 16], 0.25);
        let a = c.predict_proba(&img).unwrap();
        let b = back.predict_proba(&img).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn linear_head_round_trip() {
        let c = Classifier::new(SmallCnn::new(Architecture::with_classes(2), 1).unwrap(), Head::Linear);
        assert_eq!(from_bytes(&to_bytes(&c)).unwrap(), c);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = proto_classifier();
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&proto_classifier());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Version(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(from_bytes(b"nonsense").is_err());
    }
}
