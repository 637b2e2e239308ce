//! Named-tensor checkpoint container.
//!
//! Layout: a UTF-8 header, then raw little-endian `f64` payloads in header
//! order.
//!
//! ```text
//! flowtrack-checkpoint v1
//! tensors 2
//! embed.patch.w f64 192x64 trainable
//! embed.patch.b f64 64 trainable
//! end
//! <payload bytes>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "flowtrack-checkpoint v1";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let mut header = format!("{MAGIC}\ntensors {}\n", store.len());
    for (name, p) in store.iter() {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "unsupported tensor name {name:?}"
            )));
        }
        let dims: Vec<String> = p.value.shape().iter().map(ToString::to_string).collect();
        let flag = if p.value.requires_grad() {
            "trainable"
        } else {
            "frozen"
        };
        header.push_str(&format!("{name} f64 {} {flag}\n", dims.join("x")));
    }
    header.push_str("end\n");
    w.write_all(header.as_bytes())?;
    for (_, p) in store.iter() {
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ParamStore> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut reader)? != MAGIC {
        return Err(Error::Checkpoint("bad magic line".into()));
    }
    let count_line = next_line(&mut reader)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("bad count line {count_line:?}")))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut reader)?;
        let parts: Vec<&str> = l.split(' ').collect();
        let [name, dtype, dims, flag] = parts.as_slice() else {
            return Err(Error::Checkpoint(format!("bad tensor line {l:?}")));
        };
        if *dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
        }
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape {dims}")))?;
        let trainable = match *flag {
            "trainable" => true,
            "frozen" => false,
            other => return Err(Error::Checkpoint(format!("bad flag {other}"))),
        };
        entries.push((name.to_string(), shape, trainable));
    }
    if next_line(&mut reader)? != "end" {
        return Err(Error::Checkpoint("missing end marker".into()));
    }
    let mut store = ParamStore::new();
    for (name, shape, trainable) in entries {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        reader
            .read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated payload for {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name.clone(), Tensor::new(shape, data)?)?;
        store.set_trainable(&name, trainable)?;
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(store, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(values in proptest::collection::vec(-1e6f64..1e6, 1..40), frozen in any::<bool>()) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.insert("a.w", Tensor::new(vec![n], values.clone()).unwrap()).unwrap();
            store.insert("b", Tensor::new(vec![1, n], values.iter().map(|v| -v).collect()).unwrap()).unwrap();
            store.set_trainable("b", !frozen).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&store, &mut buf).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn header_is_plain_text() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf[..buf.len() - 48]).to_string();
        assert_eq!(
            text,
            "flowtrack-checkpoint v1\ntensors 1\nw f64 2x3 trainable\nend\n"
        );
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[4])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(buf.as_slice()).is_err());
    }
}
