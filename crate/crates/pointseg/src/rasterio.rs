//! Binary raster and checkpoint files. A raster file is a five-byte magic, an
//! ASCII header, and a little-endian payload; a checkpoint is an ASCII tensor
//! manifest followed by concatenated payloads. Both formats round-trip
//! bitwise.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{LabelMatrix, Raster};
use crate::model::ModelParams;

const RASTER_MAGIC: &[u8] = b"CRG1\n";
const CHECKPOINT_MAGIC: &[u8] = b"CRGC\n";

/// Element type of a raster payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

/// Typed payload of a raster file, row-major channel-last.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> Dtype {
        match self {
            Payload::U8(_) => Dtype::U8,
            Payload::F32(_) => Dtype::F32,
            Payload::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::U8(v) => v.len(),
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Payload::U8(v) => v.clone(),
            Payload::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Payload::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % dtype.size() != 0 {
            return Err(Error::Format(format!(
                "payload length {} is not a multiple of element size {}",
                bytes.len(),
                dtype.size()
            )));
        }
        Ok(match dtype {
            Dtype::U8 => Payload::U8(bytes.to_vec()),
            Dtype::F32 => Payload::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => Payload::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        })
    }
}

/// An in-memory raster file: geometry header plus typed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterFile {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub payload: Payload,
}

impl RasterFile {
    pub fn new(channels: usize, height: usize, width: usize, payload: Payload) -> Result<Self> {
        let expected = channels * height * width;
        if payload.len() != expected {
            return Err(Error::Shape(format!(
                "payload has {} elements, geometry {}x{}x{} needs {}",
                payload.len(),
                height,
                width,
                channels,
                expected
            )));
        }
        Ok(RasterFile { channels, height, width, payload })
    }

    pub fn from_labels(labels: &LabelMatrix) -> Self {
        RasterFile {
            channels: 1,
            height: labels.height,
            width: labels.width,
            payload: Payload::U8(labels.labels.clone()),
        }
    }

    pub fn from_raster(raster: &Raster) -> Self {
        RasterFile {
            channels: raster.channels,
            height: raster.height,
            width: raster.width,
            payload: Payload::F64(raster.data.clone()),
        }
    }

    pub fn into_labels(self) -> Result<LabelMatrix> {
        match self.payload {
            Payload::U8(labels) if self.channels == 1 => {
                LabelMatrix::new(self.height, self.width, labels)
            }
            Payload::U8(_) => {
                Err(Error::Format(format!("label raster must have 1 channel, got {}", self.channels)))
            }
            other => Err(Error::Format(format!(
                "label raster must be u8, got {}",
                other.dtype().name()
            ))),
        }
    }

    pub fn into_raster(self) -> Result<Raster> {
        let data = match self.payload {
            Payload::F64(v) => v,
            Payload::F32(v) => v.into_iter().map(f64::from).collect(),
            Payload::U8(_) => {
                return Err(Error::Format("expected a floating-point raster, got u8".into()))
            }
        };
        Raster::new(self.height, self.width, self.channels, data)
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RASTER_MAGIC);
        out.extend_from_slice(
            format!("{} {} {} {}\n", self.payload.dtype().name(), self.channels, self.height, self.width)
                .as_bytes(),
        );
        out.extend_from_slice(&self.payload.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < RASTER_MAGIC.len() || &bytes[..RASTER_MAGIC.len()] != RASTER_MAGIC {
            return Err(Error::Format("bad raster magic (expected \"CRG1\")".into()));
        }
        let rest = &bytes[RASTER_MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("raster header line missing newline".into()))?;
        let header = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Format("raster header is not ASCII".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "raster header needs 4 fields (dtype channels height width), got {:?}",
                header
            )));
        }
        let dtype = Dtype::parse(fields[0])?;
        let parse_dim = |s: &str, name: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("raster header {name} {s:?} is not an integer")))
        };
        let channels = parse_dim(fields[1], "channels")?;
        let height = parse_dim(fields[2], "height")?;
        let width = parse_dim(fields[3], "width")?;
        let body = &rest[nl + 1..];
        let expected = channels * height * width * dtype.size();
        if body.len() != expected {
            return Err(Error::Format(format!(
                "raster payload is {} bytes, header implies {expected}",
                body.len()
            )));
        }
        RasterFile::new(channels, height, width, Payload::from_le_bytes(dtype, body)?)
    }
}

/// Writes a raster file to `path`.
pub fn write_raster(path: &Path, file: &RasterFile) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&file.encode())?;
    Ok(())
}

/// Reads a raster file from `path`.
pub fn read_raster(path: &Path) -> Result<RasterFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    RasterFile::decode(&bytes)
}

/// An ordered collection of named f64 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        Checkpoint {
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn into_params(self) -> Result<ModelParams> {
        ModelParams::from_named_tensors(&self.tensors)
    }

    fn encode(&self) -> Result<Vec<u8>> {
        let mut manifest = String::new();
        let mut payload = Vec::new();
        for (name, tensor) in &self.tensors {
            if name.contains(char::is_whitespace) || name.is_empty() {
                return Err(Error::Format(format!("tensor name {name:?} contains whitespace")));
            }
            let shape: Vec<String> = tensor.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} f64 {}\n", name, shape.join(","), payload.len()));
            for v in &tensor.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(format!("{}\n", self.tensors.len()).as_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected \"CRGC\")".into()));
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let next_line = |pos: &mut usize| -> Result<String> {
            let nl = bytes[*pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("checkpoint manifest truncated".into()))?;
            let line = std::str::from_utf8(&bytes[*pos..*pos + nl])
                .map_err(|_| Error::Format("checkpoint manifest is not ASCII".into()))?
                .to_string();
            *pos += nl + 1;
            Ok(line)
        };
        let count: usize = next_line(&mut pos)?
            .parse()
            .map_err(|_| Error::Format("checkpoint tensor count is not an integer".into()))?;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let line = next_line(&mut pos)?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!("manifest line {i} has {} fields, expected 4", fields.len())));
            }
            let name = fields[0].to_string();
            let shape: Vec<usize> = fields[1]
                .split(',')
                .map(|d| {
                    d.parse().map_err(|_| {
                        Error::Format(format!("manifest line {i}: bad shape dim {d:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            if fields[2] != "f64" {
                return Err(Error::Format(format!("manifest line {i}: unsupported dtype {}", fields[2])));
            }
            let offset: usize = fields[3]
                .parse()
                .map_err(|_| Error::Format(format!("manifest line {i}: bad offset {:?}", fields[3])))?;
            entries.push((name, shape, offset));
        }
        let body = &bytes[pos..];
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, offset) in entries {
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor {name} at offset {offset}, expected contiguous offset {expected_offset}"
                )));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > body.len() {
                return Err(Error::Format(format!("tensor {name} payload out of bounds")));
            }
            let data = body[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor { shape, data }));
            expected_offset = end;
        }
        if expected_offset != body.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing payload bytes",
                body.len() - expected_offset
            )));
        }
        Ok(Checkpoint { tensors })
    }
}

/// Writes a checkpoint to `path`.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.encode()?)?;
    Ok(())
}

/// Reads a checkpoint from `path`.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raster_round_trip_all_dtypes() {
        let payloads = [
            Payload::U8(vec![0, 1, 255, 7, 3, 4]),
            Payload::F32(vec![0.0, -1.5, f32::MIN_POSITIVE, 3.25, 9.0, -0.0]),
            Payload::F64(vec![0.0, 1.0 / 3.0, f64::MAX, -2.5e-300, 1.0, -0.0]),
        ];
        for p in payloads {
            let file = RasterFile::new(1, 2, 3, p).unwrap();
            let bytes = file.encode();
            let back = RasterFile::decode(&bytes).unwrap();
            assert_eq!(back, file);
            assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn raster_header_is_readable_ascii() {
        let file = RasterFile::new(2, 3, 4, Payload::U8(vec![1; 24])).unwrap();
        let bytes = file.encode();
        assert_eq!(&bytes[..5], b"CRG1\n");
        assert_eq!(&bytes[5..14], b"u8 2 3 4\n");
    }

    #[test]
    fn raster_rejects_corruption() {
        let file = RasterFile::new(1, 2, 2, Payload::F64(vec![1.0; 4])).unwrap();
        let bytes = file.encode();
        // bad magic
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(RasterFile::decode(&b), Err(Error::Format(_))));
        // truncated payload
        assert!(matches!(RasterFile::decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        // trailing garbage
        let mut b = bytes.clone();
        b.push(0);
        assert!(matches!(RasterFile::decode(&b), Err(Error::Format(_))));
        // unknown dtype
        let mut b = bytes;
        b[5] = b'i';
        assert!(matches!(RasterFile::decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn raster_geometry_mismatch_rejected() {
        assert!(matches!(
            RasterFile::new(1, 2, 2, Payload::U8(vec![0; 3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn labels_and_rasters_convert_back() {
        let labels = LabelMatrix::new(2, 3, vec![0, 1, 2, 0, 3, 1]).unwrap();
        let back = RasterFile::from_labels(&labels).into_labels().unwrap();
        assert_eq!(back, labels);

        let raster = Raster::new(2, 2, 2, vec![0.1, 0.9, 0.5, 0.5, 1.0, 0.0, 0.25, 0.75]).unwrap();
        let back = RasterFile::from_raster(&raster).into_raster().unwrap();
        assert_eq!(back, raster);
    }

    #[test]
    fn wrong_payload_type_for_labels_rejected() {
        let file = RasterFile::new(1, 1, 1, Payload::F64(vec![0.5])).unwrap();
        assert!(matches!(file.into_labels(), Err(Error::Format(_))));
        let file = RasterFile::new(1, 1, 1, Payload::U8(vec![1])).unwrap();
        assert!(matches!(file.into_raster(), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip_model_params() {
        let params = model::init_params(3, 3, 4, 2, 3).unwrap();
        let ckpt = Checkpoint::from_params(&params);
        let bytes = ckpt.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.into_params().unwrap(), params);
    }

    #[test]
    fn checkpoint_round_trip_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..100 {
            let n_tensors = rng.gen_range(1..=5);
            let tensors: Vec<(String, Tensor)> = (0..n_tensors)
                .map(|i| {
                    let rank = rng.gen_range(1..=4);
                    let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..=5)).collect();
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
                    (format!("tensor.{i}"), Tensor { shape, data })
                })
                .collect();
            let ckpt = Checkpoint { tensors };
            let bytes = ckpt.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ckpt, "case {case}");
            assert_eq!(back.encode().unwrap(), bytes, "case {case}");
        }
    }

    #[test]
    fn checkpoint_rejects_gap_and_truncation() {
        let ckpt = Checkpoint {
            tensors: vec![("a".into(), Tensor { shape: vec![2], data: vec![1.0, 2.0] })],
        };
        let bytes = ckpt.encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
        let mut b = bytes;
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(Checkpoint::decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn file_io_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMatrix::new(3, 3, vec![1, 0, 2, 0, 0, 1, 2, 2, 0]).unwrap();
        let path = dir.path().join("labels.crg");
        write_raster(&path, &RasterFile::from_labels(&labels)).unwrap();
        assert_eq!(read_raster(&path).unwrap().into_labels().unwrap(), labels);

        let params = model::init_params(0, 2, 3, 1, 3).unwrap();
        let cpath = dir.path().join("model.ckpt");
        write_checkpoint(&cpath, &Checkpoint::from_params(&params)).unwrap();
        assert_eq!(read_checkpoint(&cpath).unwrap().into_params().unwrap(), params);
    }
}
