//! Checkpoint persistence: a little-endian binary container holding named
//! parameter tensors at f32 storage precision, bound to a config digest.

use std::path::Path;

use crate::error::Error;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;
use crate::Result;

pub const MAGIC: [u8; 4] = *b"VLDK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: u64,
    /// Name → tensor pairs in serialization order (sorted by name).
    pub tensors: Vec<(String, Tensor2<f32>)>,
}

impl Checkpoint {
    /// Snapshot a parameter store, truncating values to f32.
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config_digest: u64) -> Self {
        let tensors = store
            .iter()
            .map(|(name, p)| (name.clone(), p.value.cast::<f32>()))
            .collect();
        Checkpoint { version: VERSION, config_digest, tensors }
    }

    /// Rebuild a parameter store at compute precision.
    pub fn to_store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            store.insert(name, t.cast::<T>())?;
        }
        Ok(store)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.config_digest.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(2); // rank
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let config_digest = u64::from_le_bytes(r.take(8, "config digest")?.try_into().unwrap());
        let count = u64::from_le_bytes(r.take(8, "tensor count")?.try_into().unwrap());
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = u32::from_le_bytes(r.take(4, "name length")?.try_into().unwrap()) as usize;
            if name_len > 1 << 16 {
                return Err(Error::Checkpoint(format!("tensor {i}: implausible name length {name_len}")));
            }
            let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("tensor '{name}': unknown dtype code {dtype}")));
            }
            let rank = r.take(1, "rank")?[0];
            if rank != 2 {
                return Err(Error::Checkpoint(format!("tensor '{name}': rank {rank}, expected 2")));
            }
            let rows = u64::from_le_bytes(r.take(8, "rows")?.try_into().unwrap()) as usize;
            let cols = u64::from_le_bytes(r.take(8, "cols")?.try_into().unwrap()) as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| {
                Error::Checkpoint(format!("tensor '{name}': dimension overflow {rows}x{cols}"))
            })?;
            let raw = r.take(4 * n, "values")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor2::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { version, config_digest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {field} (need {n} bytes at offset {}, have {})",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sample_store() -> ParamStore<f64> {
        let mut rng = RngStream::new(11);
        let mut store = ParamStore::new();
        for (name, r, c) in [("a.w", 3, 4), ("a.b", 1, 4), ("z.embed", 5, 2)] {
            let mut t = Tensor2::zeros(r, c);
            for v in t.data_mut() {
                *v = rng.normal();
            }
            store.insert(name, t).unwrap();
        }
        store
    }

    #[test]
    fn save_load_save_identical_bytes() {
        let store = sample_store();
        let ck = Checkpoint::from_store(&store, 0xdead_beef);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config_digest, 0xdead_beef);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn round_trip_bit_exact_at_storage_precision() {
        let store = sample_store();
        let ck = Checkpoint::from_store(&store, 1);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let restored: ParamStore<f64> = back.to_store().unwrap();
        for (name, p) in store.iter() {
            let orig32 = p.value.cast::<f32>();
            let got32 = restored.value(name).cast::<f32>();
            assert_eq!(orig32.data(), got32.data(), "{name}");
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Checkpoint::from_store(&sample_store(), 0).to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn bad_version_rejected() {
        let mut bytes = Checkpoint::from_store(&sample_store(), 0).to_bytes();
        bytes[4] = 99;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_names_the_field() {
        let bytes = Checkpoint::from_store(&sample_store(), 0).to_bytes();
        for cut in [2, 10, 25, bytes.len() - 3] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("truncated"), "cut {cut}: {err}");
        }
    }

    #[test]
    fn corrupted_length_field_is_clean_error() {
        let mut bytes = Checkpoint::from_store(&sample_store(), 0).to_bytes();
        // first tensor's name length field sits right after the 24-byte header
        bytes[24..28].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = Checkpoint::from_store(&sample_store(), 0).to_bytes();
        bytes.push(0);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("drivelite_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let ck = Checkpoint::from_store(&sample_store(), 7);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        std::fs::remove_file(&path).unwrap();
    }
}
