//! JSON checkpoints for dictionaries and networks.
//!
//! Both use one container:
//!
//! ```json
//! { "format": "vlgo-checkpoint", "version": 1, "kind": "operator_dictionary",
//!   "n_ops": 6, "dim": 3, "block_size": 3, "params": [...] }
//! { "format": "vlgo-checkpoint", "version": 1, "kind": "mlp",
//!   "dims": [16, 64, 8], "negative_slope": 0.01, "head": {"kind": "plain"}, "params": [...] }
//! ```
//!
//! `params` is the flat parameter vector in the layout documented on
//! [`OperatorDictionary`] and [`MlpNet`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::write_text;
use crate::nn::{Head, MlpNet};
use crate::operators::OperatorDictionary;

pub const FORMAT: &str = "vlgo-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    OperatorDictionary {
        n_ops: usize,
        dim: usize,
        block_size: usize,
        params: Vec<f64>,
    },
    Mlp {
        dims: Vec<usize>,
        negative_slope: f64,
        head: Head,
        params: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Checkpoint {
    pub fn from_dict(dict: &OperatorDictionary) -> Self {
        Self::wrap(Payload::OperatorDictionary {
            n_ops: dict.n_ops(),
            dim: dict.dim(),
            block_size: dict.block_size(),
            params: dict.params().to_vec(),
        })
    }

    pub fn from_mlp(net: &MlpNet) -> Self {
        Self::wrap(Payload::Mlp {
            dims: net.dims().to_vec(),
            negative_slope: net.negative_slope(),
            head: net.head(),
            params: net.params().to_vec(),
        })
    }

    fn wrap(payload: Payload) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            payload,
        }
    }

    fn check(&self) -> Result<()> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn into_dict(self) -> Result<OperatorDictionary> {
        self.check()?;
        match self.payload {
            Payload::OperatorDictionary {
                n_ops,
                dim,
                block_size,
                params,
            } => OperatorDictionary::from_params(n_ops, dim, block_size, params),
            Payload::Mlp { .. } => Err(Error::invalid("checkpoint holds a network, not a dictionary")),
        }
    }

    pub fn into_mlp(self) -> Result<MlpNet> {
        self.check()?;
        match self.payload {
            Payload::Mlp {
                dims,
                negative_slope,
                head,
                params,
            } => MlpNet::from_params(&dims, negative_slope, head, params),
            Payload::OperatorDictionary { .. } => Err(Error::invalid("checkpoint holds a dictionary, not a network")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn round_trips() {
        let dict = OperatorDictionary::from_params(2, 2, 1, vec![0.5, -1.0, 0.25, 3.0]).unwrap();
        let text = Checkpoint::from_dict(&dict).to_json().unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_dict().unwrap(), dict);

        let net = MlpNet::new(&[3, 4, 4], 0.01, Head::laplacian_default(), &mut stream(3, 0)).unwrap();
        let back: Checkpoint = serde_json::from_str(&Checkpoint::from_mlp(&net).to_json().unwrap()).unwrap();
        let restored = back.into_mlp().unwrap();
        assert_eq!(restored.params(), net.params());
        assert_eq!(restored.dims(), net.dims());
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let dict = OperatorDictionary::from_params(1, 1, 1, vec![0.5]).unwrap();
        assert!(Checkpoint::from_dict(&dict).into_mlp().is_err());
    }
}
