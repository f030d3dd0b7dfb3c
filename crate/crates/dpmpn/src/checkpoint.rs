//! Checkpoint serialization.
//!
//! Layout: the magic line `DPMPN1`, one ASCII header line
//! `n_entities n_relations n_dims n_dims_att`, then per parameter a name
//! line, a shape line (dims space-separated), and the raw little-endian
//! f32 payload; a trailing CRC32 line (lowercase hex of everything before
//! it) closes the file. Round trips are byte-exact.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dims, ModelParams, ParamEntry};

const MAGIC: &[u8] = b"DPMPN1\n";

fn cerr(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serialize a model to bytes in checkpoint layout.
pub fn to_bytes(model: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let d = &model.dims;
    buf.extend_from_slice(
        format!(
            "{} {} {} {}\n",
            d.n_entities, d.n_relations, d.state, d.attention
        )
        .as_bytes(),
    );
    for e in model.entries() {
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(b'\n');
        let dims: Vec<String> = e.shape.iter().map(|x| x.to_string()).collect();
        buf.extend_from_slice(dims.join(" ").as_bytes());
        buf.push(b'\n');
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(format!("{crc:08x}\n").as_bytes());
    buf
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| cerr("unexpected end of file"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| cerr("non-UTF8 text line"))
    }

    fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(cerr("truncated parameter payload"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parse checkpoint bytes. Checksum and the parameter catalog are fully
/// validated before a model is returned.
pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    if buf.len() < MAGIC.len() + 10 {
        return Err(cerr("file too short to be a checkpoint"));
    }
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(cerr("bad magic; not a checkpoint file"));
    }
    // Checksum line: last 9 bytes are 8 hex digits plus newline.
    let body_len = buf.len() - 9;
    let crc_line = std::str::from_utf8(&buf[body_len..])
        .map_err(|_| cerr("bad checksum line"))?
        .trim_end();
    let stored = u32::from_str_radix(crc_line, 16).map_err(|_| cerr("bad checksum line"))?;
    let actual = crc32fast::hash(&buf[..body_len]);
    if stored != actual {
        return Err(cerr(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut r = Reader {
        buf: &buf[..body_len],
        pos: MAGIC.len(),
    };
    let header = r.line()?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|f| {
            f.parse()
                .map_err(|_| cerr(format!("bad header field '{f}'")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let [n_entities, n_relations, state, attention] = fields[..] else {
        return Err(cerr(format!(
            "header has {} fields, expected 4",
            fields.len()
        )));
    };

    let mut entries: Vec<ParamEntry> = Vec::new();
    let mut hidden = state;
    while r.pos < body_len {
        let name = r.line()?.to_string();
        let shape: Vec<usize> = r
            .line()?
            .split_whitespace()
            .map(|f| {
                f.parse()
                    .map_err(|_| cerr(format!("bad shape field '{f}'")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.raw(count * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if name == "ignn_msg_w1" && shape.len() == 2 {
            hidden = shape[1];
        }
        // Catalog names are static; pick the interned one.
        let template = Dims {
            n_entities,
            n_relations,
            state,
            attention,
            hidden,
        };
        let static_name = crate::model::catalog(&template)
            .iter()
            .map(|(n, _)| *n)
            .find(|n| *n == name)
            .ok_or_else(|| cerr(format!("unknown parameter block '{name}'")))?;
        entries.push(ParamEntry {
            name: static_name,
            shape,
            data,
        });
    }

    let dims = Dims {
        n_entities,
        n_relations,
        state,
        attention,
        hidden,
    };
    ModelParams::from_entries(dims, entries)
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&buf)
}

/// Load and insist the checkpoint matches the expected dimensions.
pub fn load_checked(path: &Path, expect: &Dims) -> Result<ModelParams> {
    let model = load(path)?;
    let d = &model.dims;
    let mismatches: Vec<String> = [
        ("n_entities", d.n_entities, expect.n_entities),
        ("n_relations", d.n_relations, expect.n_relations),
        ("n_dims", d.state, expect.state),
        ("n_dims_att", d.attention, expect.attention),
        ("mlp_hidden", d.hidden, expect.hidden),
    ]
    .iter()
    .filter(|(_, got, want)| got != want)
    .map(|(name, got, want)| format!("{name}: checkpoint has {got}, run expects {want}"))
    .collect();
    if !mismatches.is_empty() {
        return Err(cerr(format!(
            "dimension mismatch ({})",
            mismatches.join("; ")
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> ModelParams {
        let dims = Dims {
            n_entities: 5,
            n_relations: 4,
            state: 6,
            attention: 3,
            hidden: 8,
        };
        ModelParams::init(dims, 0.1, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model(1);
        let bytes = to_bytes(&m);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.dims, m.dims);
        for (a, b) in loaded.entries().iter().zip(m.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Re-serialization is byte-identical.
        assert_eq!(to_bytes(&loaded), bytes);
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let m = model(2);
        let bytes = to_bytes(&m);
        let cut = &bytes[..bytes.len() - 40];
        // A truncated file either loses its checksum line entirely or the
        // checksum no longer matches; both must fail cleanly.
        assert!(from_bytes(cut).is_err());
        let mut corrupted = bytes.clone();
        let mid = corrupted.len() / 2;
        corrupted[mid] ^= 0xff;
        assert!(from_bytes(&corrupted).is_err());
    }

    #[test]
    fn bad_magic_rejected() {
        let m = model(3);
        let mut bytes = to_bytes(&m);
        bytes[0] = b'X';
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_both_values() {
        let m = model(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&m, &path).unwrap();
        let want = Dims {
            n_entities: 5,
            n_relations: 4,
            state: 12,
            attention: 3,
            hidden: 8,
        };
        let err = load_checked(&path, &want).unwrap_err().to_string();
        assert!(err.contains("6") && err.contains("12"), "{err}");
    }

    #[test]
    fn save_load_file_round_trip() {
        let m = model(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&m, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(to_bytes(&loaded), to_bytes(&m));
    }
}
