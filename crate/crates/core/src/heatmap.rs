//! Per-pixel importance scores and their on-disk format.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{DecodeError, Error, Result};
use crate::grid::Grid;

pub const HEATMAP_MAGIC: &str = "ATTRIBHMP";
pub const HEATMAP_VERSION: u32 = 1;

/// Post-processing steps, applied in the order given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostOp {
    /// Negate path-method maps when the predicted class is 0.
    SignInvertIfClass0,
    Absolute,
    MinmaxNormalize,
}

impl PostOp {
    pub fn as_str(&self) -> &'static str {
        match self {
            PostOp::SignInvertIfClass0 => "sign_invert_if_class0",
            PostOp::Absolute => "absolute",
            PostOp::MinmaxNormalize => "minmax_normalize",
        }
    }

    pub fn parse(s: &str) -> Option<PostOp> {
        [PostOp::SignInvertIfClass0, PostOp::Absolute, PostOp::MinmaxNormalize]
            .into_iter()
            .find(|op| op.as_str() == s)
    }
}

/// Which estimator produced a map, with what parameters, and which
/// post-processing steps have been applied since.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    /// Estimator key, e.g. `intgrad`.
    pub estimator: String,
    /// Free-form `key=value` parameter list.
    pub params: String,
    pub post: Vec<PostOp>,
    /// Set when a sign inversion actually negated the scores.
    pub inverted: bool,
}

impl Provenance {
    pub fn new(estimator: impl Into<String>, params: impl Into<String>) -> Self {
        Self {
            estimator: estimator.into(),
            params: params.into(),
            post: Vec::new(),
            inverted: false,
        }
    }

    pub fn has(&self, op: PostOp) -> bool {
        self.post.contains(&op)
    }

    fn parse(s: &str) -> Result<Self, DecodeError> {
        let mut parts = s.split('|');
        let head = parts.next().unwrap_or_default();
        let (estimator, params) = match head.split_once('[') {
            Some((e, rest)) => (e, rest.strip_suffix(']').unwrap_or(rest)),
            None => (head, ""),
        };
        let mut prov = Provenance::new(estimator, params);
        for p in parts {
            if p == "inverted" {
                prov.inverted = true;
                continue;
            }
            prov.post
                .push(PostOp::parse(p).ok_or_else(|| DecodeError::Malformed(format!("unknown post-processing step {p:?}")))?);
        }
        Ok(prov)
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.estimator, self.params)?;
        for op in &self.post {
            write!(f, "|{}", op.as_str())?;
        }
        if self.inverted {
            write!(f, "|inverted")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub scores: Grid<f64>,
    pub provenance: Provenance,
}

impl Heatmap {
    pub fn new(scores: Grid<f64>, provenance: Provenance) -> Self {
        Self { scores, provenance }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.scores.dims()
    }

    pub fn data(&self) -> &[f64] {
        self.scores.data()
    }

    pub fn is_finite(&self) -> bool {
        self.scores.data().iter().all(|v| v.is_finite())
    }
}

pub fn encode_heatmap(h: &Heatmap) -> Vec<u8> {
    let mut out = HEATMAP_MAGIC.as_bytes().to_vec();
    binio::put_u32(&mut out, HEATMAP_VERSION);
    binio::put_string(&mut out, &h.provenance.to_string());
    binio::put_u32(&mut out, h.scores.height() as u32);
    binio::put_u32(&mut out, h.scores.width() as u32);
    binio::put_f64s(&mut out, h.scores.data());
    out
}

pub fn decode_heatmap(bytes: &[u8]) -> Result<Heatmap> {
    let mut r = Reader::new(bytes);
    let mut inner = || -> Result<Heatmap, DecodeError> {
        r.magic(HEATMAP_MAGIC)?;
        let version = r.u32()?;
        if version != HEATMAP_VERSION {
            return Err(DecodeError::UnsupportedVersion {
                found: version,
                expected: HEATMAP_VERSION,
            });
        }
        let provenance = Provenance::parse(&r.string()?)?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let data = r.f64s(h * w)?;
        r.finish()?;
        let scores = Grid::new(h, w, data).map_err(|e| DecodeError::Malformed(e.to_string()))?;
        Ok(Heatmap { scores, provenance })
    };
    inner().map_err(Error::decode)
}

pub fn write_heatmap(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_heatmap(h)).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap(path: impl AsRef<Path>) -> Result<Heatmap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_heatmap(&bytes).map_err(|e| e.with_path(path))
}
