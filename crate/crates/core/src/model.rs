use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxiliary::AuxNet;
use crate::diffcore::ParamSet;
use crate::nn::Embedding;
use crate::updown::PrimaryNet;
use crate::{Error, Result, MAX_LEN};

/// Layer widths. `feature` is the region feature width `d_I`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub att: usize,
    pub feature: usize,
    pub max_len: usize,
}

impl ModelDims {
    /// Small widths for CPU-only experiments.
    pub fn desk(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 64,
            hidden: 64,
            att: 32,
            feature: 16,
            max_len: MAX_LEN,
        }
    }

    /// Widths used for full-size MSCOCO models.
    pub fn full(vocab: usize) -> Self {
        ModelDims {
            vocab,
            embed: 1000,
            hidden: 1000,
            att: 512,
            feature: 2048,
            max_len: MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("vocab", self.vocab),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("att", self.att),
            ("feature", self.feature),
            ("max_len", self.max_len),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab <= crate::UNK {
            return Err(Error::Config("vocab must include the four special tokens".into()));
        }
        Ok(())
    }
}

/// Up-Down primary network plus the auxiliary guidance network.
///
/// Parameters of the primary network are prefixed `primary.`, those of the
/// auxiliary network `aux.`. The word embedding is shared and belongs to the
/// primary network.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub dims: ModelDims,
    pub params: ParamSet,
    pub primary: PrimaryNet,
    pub aux: AuxNet,
}

impl CaptionModel {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let embed = Embedding::new(&mut params, "primary.embed", dims.vocab, dims.embed, &mut rng);
        let primary = PrimaryNet::new(&mut params, embed, &dims, &mut rng);
        let aux = AuxNet::new(&mut params, &dims, &mut rng);
        Ok(CaptionModel {
            dims,
            params,
            primary,
            aux,
        })
    }

    pub fn is_primary_param(name: &str) -> bool {
        name.starts_with("primary.")
    }
}
