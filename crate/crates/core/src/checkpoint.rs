//! Binary model container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `AQMM` |
//! | 4 | format version (`u32`) |
//! | 1 | model kind: 0 binned, 1 MoG, 2 grid |
//! | 7 × 4 | config fields (`u32`), see below |
//! | 4 + n | run-config text length (`u32`) and UTF-8 bytes |
//! | 8 | parameter count (`u64`) |
//! | 4 × count | parameters as `f32` |
//!
//! Config fields for scorers: bins, frequencies, context width, hidden
//! widths (2), viewpoints, MoG components (0 when binned). For the grid
//! model: frequencies, context width, hidden widths (2), viewpoints,
//! training candidates, 0.
//!
//! Parameters follow tensor order: embedding, context weight, feature
//! weight, first bias, second weight, second bias, output weight, output
//! bias; matrices row-major with rows indexing outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridConfig, GridModel};
use crate::nn::ConditionedMlp;
use crate::scorer::{HeadKind, ScorerConfig, ScorerParameters};

pub const MAGIC: [u8; 4] = *b"AQMM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Aquamam,
    AquamamMog,
    Grid,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Aquamam => "aquamam",
            ModelKind::AquamamMog => "aquamam-mog",
            ModelKind::Grid => "grid",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ModelKind::Aquamam => 0,
            ModelKind::AquamamMog => 1,
            ModelKind::Grid => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Scorer(ScorerParameters),
    Grid(GridModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Scorer(p) => match p.config().head {
                HeadKind::Binned => ModelKind::Aquamam,
                HeadKind::Mog { .. } => ModelKind::AquamamMog,
            },
            Model::Grid(_) => ModelKind::Grid,
        }
    }

    pub fn network(&self) -> &ConditionedMlp {
        match self {
            Model::Scorer(p) => p.network(),
            Model::Grid(g) => g.network(),
        }
    }
}

/// A model plus the run configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub run_config: String,
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let kind = self.model.kind();
        let fields: [usize; 7] = match &self.model {
            Model::Scorer(p) => {
                let c = p.config();
                let k = match c.head {
                    HeadKind::Binned => 0,
                    HeadKind::Mog { components } => components,
                };
                [c.bins, c.frequencies, c.context_dim, c.hidden[0], c.hidden[1], c.viewpoints, k]
            }
            Model::Grid(g) => {
                let c = g.config();
                [c.frequencies, c.context_dim, c.hidden[0], c.hidden[1], c.viewpoints, c.train_candidates, 0]
            }
        };
        let params = self.model.network().params();
        if let Some(i) = params.iter().position(|&p| f64::from(p as f32) != p) {
            return Err(Error::Checkpoint(format!(
                "parameter {i} = {} is not representable as f32",
                params[i]
            )));
        }
        out.write_all(&MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&[kind.tag()])?;
        for f in fields {
            out.write_all(&to_u32(f)?.to_le_bytes())?;
        }
        out.write_all(&to_u32(self.run_config.len())?.to_le_bytes())?;
        out.write_all(self.run_config.as_bytes())?;
        out.write_all(&(params.len() as u64).to_le_bytes())?;
        for &p in params {
            out.write_all(&(p as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"AQMM\"")));
        }
        let version = read_u32(&mut input, "version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut tag = [0u8; 1];
        read_exact(&mut input, &mut tag, "model kind")?;
        let mut f = [0usize; 7];
        for v in &mut f {
            *v = read_u32(&mut input, "config")? as usize;
        }
        let len = read_u32(&mut input, "run-config length")? as usize;
        let mut text = vec![0u8; len];
        read_exact(&mut input, &mut text, "run config")?;
        let run_config =
            String::from_utf8(text).map_err(|_| Error::Checkpoint("run config is not UTF-8".into()))?;
        let mut count = [0u8; 8];
        read_exact(&mut input, &mut count, "parameter count")?;
        let count = u64::from_le_bytes(count) as usize;

        let read_params = |input: &mut R, expected: usize| -> Result<Vec<f64>> {
            if count != expected {
                return Err(Error::Checkpoint(format!(
                    "{count} parameters stored, config implies {expected}"
                )));
            }
            let mut bytes = vec![0u8; 4 * count];
            read_exact(input, &mut bytes, "parameters")?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect())
        };

        let model = match tag[0] {
            0 | 1 => {
                let head = if tag[0] == 0 {
                    HeadKind::Binned
                } else {
                    HeadKind::Mog { components: f[6] }
                };
                let config = ScorerConfig {
                    bins: f[0],
                    frequencies: f[1],
                    context_dim: f[2],
                    hidden: [f[3], f[4]],
                    viewpoints: f[5],
                    head,
                };
                config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
                let shape = config.net_shape();
                let params = read_params(&mut input, shape.param_count())?;
                Model::Scorer(ScorerParameters::from_network(config, ConditionedMlp::from_params(shape, params)?)?)
            }
            2 => {
                let config = GridConfig {
                    frequencies: f[0],
                    context_dim: f[1],
                    hidden: [f[2], f[3]],
                    viewpoints: f[4],
                    train_candidates: f[5],
                };
                config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
                let shape = config.net_shape();
                let params = read_params(&mut input, shape.param_count())?;
                Model::Grid(GridModel::from_network(config, ConditionedMlp::from_params(shape, params)?)?)
            }
            other => return Err(Error::Checkpoint(format!("unknown model kind tag {other}"))),
        };
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self { model, run_config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("file truncated in {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
