//! Preprocessed tensor archive.
//!
//! One archive holds the model inputs of one patient. All integers and floats
//! are little-endian:
//!
//! ```text
//! magic        4 bytes  "CTP1"
//! id_len       u32
//! patient_id   id_len bytes, UTF-8
//! slice_count  u32
//! height       u32      always 224
//! width        u32      always 224
//! channels     u32      always 3
//! values       f32 x slice_count*height*width*channels
//!              slice-major, row-major, channel-last
//! ```
//!
//! Archives may be concatenated back to back in a stream; this is how the
//! scorer subprocess protocol sends several patients over one pipe.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::ModelInputTensor;

pub const MAGIC: &[u8; 4] = b"CTP1";
pub const FILE_EXTENSION: &str = "ctp";

const MAX_ID_LEN: u32 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub patient_id: String,
    pub tensors: Vec<ModelInputTensor>,
}

impl TensorArchive {
    pub fn new(patient_id: impl Into<String>, tensors: Vec<ModelInputTensor>) -> Self {
        Self {
            patient_id: patient_id.into(),
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let id = self.patient_id.as_bytes();
        w.write_all(MAGIC)?;
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for dim in [
            ModelInputTensor::HEIGHT,
            ModelInputTensor::WIDTH,
            ModelInputTensor::CHANNELS,
        ] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(ModelInputTensor::LEN * 4);
        for tensor in &self.tensors {
            buf.clear();
            for v in tensor.channel_last() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Reads the next archive from a stream. Returns `Ok(None)` on a clean end
    /// of input (no bytes before the magic).
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        let got = read_fully(r, &mut magic)?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 {
            return Err(Error::Archive("truncated magic".into()));
        }
        if &magic != MAGIC {
            return Err(Error::Archive(format!("bad magic {magic:02x?}")));
        }
        let id_len = read_u32(r, "patient_id length")?;
        if id_len > MAX_ID_LEN {
            return Err(Error::Archive(format!("patient_id length {id_len} too large")));
        }
        let mut id = vec![0u8; id_len as usize];
        read_exact(r, &mut id, "patient_id")?;
        let patient_id = String::from_utf8(id)
            .map_err(|_| Error::Archive("patient_id is not valid UTF-8".into()))?;
        let count = read_u32(r, "slice count")? as usize;
        let dims = [
            read_u32(r, "height")?,
            read_u32(r, "width")?,
            read_u32(r, "channels")?,
        ];
        let expected = [
            ModelInputTensor::HEIGHT as u32,
            ModelInputTensor::WIDTH as u32,
            ModelInputTensor::CHANNELS as u32,
        ];
        if dims != expected {
            return Err(Error::Archive(format!(
                "dims {dims:?} for {patient_id}, expected {expected:?}"
            )));
        }

        let mut bytes = vec![0u8; ModelInputTensor::LEN * 4];
        let mut tensors = Vec::with_capacity(count.min(4096));
        for index in 0..count {
            read_exact(r, &mut bytes, "tensor values")?;
            let mut plane = Vec::with_capacity(ModelInputTensor::PLANE_LEN);
            for pixel in bytes.chunks_exact(4 * ModelInputTensor::CHANNELS) {
                let first = f32::from_le_bytes(pixel[..4].try_into().unwrap());
                if pixel[4..]
                    .chunks_exact(4)
                    .any(|c| c != &pixel[..4])
                {
                    return Err(Error::Archive(format!(
                        "{patient_id} slice {index}: channels are not replicas"
                    )));
                }
                plane.push(first);
            }
            let tensor = ModelInputTensor::from_plane(plane).map_err(|e| {
                Error::Archive(format!("{patient_id} slice {index}: {e}"))
            })?;
            tensors.push(tensor);
        }
        Ok(Some(Self {
            patient_id,
            tensors,
        }))
    }

    pub fn read_all<R: Read>(r: &mut R) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        while let Some(archive) = Self::read_from(r)? {
            out.push(archive);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let archive = Self::read_from(&mut reader)
            .map_err(|e| Error::Archive(format!("{}: {e}", path.display())))?
            .ok_or_else(|| Error::Archive(format!("{}: empty file", path.display())))?;
        let mut trailing = [0u8; 1];
        if read_fully(&mut reader, &mut trailing)? != 0 {
            return Err(Error::Archive(format!(
                "{}: trailing bytes after archive",
                path.display()
            )));
        }
        Ok(archive)
    }

    /// Writes the archive to `path` atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic_with(path, |w| {
            let mut buffered = BufWriter::new(w);
            self.write_to(&mut buffered)?;
            buffered.flush()
        })
    }
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Archive(e.to_string())),
        }
    }
    Ok(filled)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    if read_fully(r, buf)? < buf.len() {
        return Err(Error::Archive(format!("truncated {what}")));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(offset: f32) -> ModelInputTensor {
        let plane = (0..ModelInputTensor::PLANE_LEN)
            .map(|i| (i as f32 * 0.001 + offset) % 1.0)
            .collect();
        ModelInputTensor::from_plane(plane).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = TensorArchive::new("P7", vec![ramp(0.0)]).to_bytes();
        assert_eq!(&bytes[..4], b"CTP1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..10], b"P7");
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &224u32.to_le_bytes());
        assert_eq!(&bytes[18..22], &224u32.to_le_bytes());
        assert_eq!(&bytes[22..26], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 26 + 224 * 224 * 3 * 4);
        // pixel (0, 1) channel 2
        let at = 26 + (1 * 3 + 2) * 4;
        assert_eq!(&bytes[at..at + 4], &0.001f32.to_le_bytes());
    }

    #[test]
    fn concatenated_stream() {
        let a = TensorArchive::new("A", vec![ramp(0.1), ramp(0.2)]);
        let b = TensorArchive::new("B", vec![]);
        let mut stream = a.to_bytes();
        stream.extend(b.to_bytes());
        let back = TensorArchive::read_all(&mut stream.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
        assert!(TensorArchive::read_all(&mut io::empty()).unwrap().is_empty());
    }

    #[test]
    fn truncated_and_corrupt_streams() {
        let bytes = TensorArchive::new("A", vec![ramp(0.3)]).to_bytes();
        for cut in [2, 9, 20, bytes.len() - 1] {
            assert!(TensorArchive::read_from(&mut &bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorArchive::read_from(&mut bad.as_slice()).is_err());

        let mut mixed = bytes.clone();
        let at = 26 + 4; // channel 1 of pixel 0
        mixed[at..at + 4].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(TensorArchive::read_from(&mut mixed.as_slice()).is_err());

        let mut wrong_dims = bytes;
        wrong_dims[14..18].copy_from_slice(&100u32.to_le_bytes());
        assert!(TensorArchive::read_from(&mut wrong_dims.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("P.ctp");
        let archive = TensorArchive::new("P", vec![ramp(0.5)]);
        archive.save(&path).unwrap();
        assert_eq!(TensorArchive::load(&path).unwrap(), archive);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(
            id in "[A-Za-z0-9_-]{0,12}",
            seeds in prop::collection::vec(0u32..1_000_000, 0..3),
        ) {
            let tensors: Vec<_> = seeds
                .iter()
                .map(|&s| {
                    let plane = (0..ModelInputTensor::PLANE_LEN)
                        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(s) % 256) as f32 / 255.0)
                        .collect();
                    ModelInputTensor::from_plane(plane).unwrap()
                })
                .collect();
            let archive = TensorArchive::new(id, tensors);
            let bytes = archive.to_bytes();
            let back = TensorArchive::read_from(&mut bytes.as_slice()).unwrap().unwrap();
            prop_assert_eq!(&back.to_bytes(), &bytes);
            prop_assert_eq!(back, archive);
        }
    }
}
