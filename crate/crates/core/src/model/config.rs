use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the factorized network.
///
/// Layer indices in this crate are 0-based; `skip_layer` is 1-based to match
/// the usual "skip at the fifth layer" phrasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of generated encoder layers, including the density/feature head.
    pub layers: usize,
    /// Hidden width of the encoder.
    pub width: usize,
    /// Factorization rank shared by scene-specific and cross-scene matrices.
    pub rank: usize,
    /// Length of each per-layer noise vector.
    pub noise_dim: usize,
    pub pos_degrees: usize,
    pub dir_degrees: usize,
    /// 1-based encoder layer that receives the re-injected position encoding.
    pub skip_layer: usize,
    pub decoder_hidden: usize,
    pub generator_hidden: usize,
    /// Insert the per-scene `rank × rank` coefficient matrix.
    pub use_coefficients: bool,
    /// Generate scene-specific matrices from noise; otherwise learn them directly.
    pub use_generator: bool,
}

impl ModelConfig {
    /// Full-size network: nine generated layers of width 256, rank 21.
    pub fn full() -> Self {
        Self {
            layers: 9,
            width: 256,
            rank: 21,
            noise_dim: 16,
            pos_degrees: 10,
            dir_degrees: 4,
            skip_layer: 5,
            decoder_hidden: 128,
            generator_hidden: 64,
            use_coefficients: true,
            use_generator: true,
        }
    }

    /// Small network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            width: 64,
            rank: 8,
            noise_dim: 8,
            pos_degrees: 6,
            dir_degrees: 2,
            skip_layer: 3,
            decoder_hidden: 64,
            generator_hidden: 32,
            use_coefficients: true,
            use_generator: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("width", self.width),
            ("rank", self.rank),
            ("noise_dim", self.noise_dim),
            ("decoder_hidden", self.decoder_hidden),
            ("generator_hidden", self.generator_hidden),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.layers < 2 {
            return Err(Error::config("layers", "need at least 2 encoder layers"));
        }
        if self.skip_layer < 2 || self.skip_layer > self.layers - 1 {
            return Err(Error::config("skip_layer", format!("must lie in [2, {}]", self.layers - 1)));
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        3 * (1 + 2 * self.pos_degrees)
    }

    pub fn dir_dim(&self) -> usize {
        3 * (1 + 2 * self.dir_degrees)
    }

    /// Input width of encoder layer `l` (0-based).
    pub fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.pos_dim()
        } else if l + 1 == self.skip_layer {
            self.width + self.pos_dim()
        } else {
            self.width
        }
    }

    /// Output width of encoder layer `l`; the last layer also emits raw density.
    pub fn layer_out(&self, l: usize) -> usize {
        if l + 1 == self.layers {
            self.width + 1
        } else {
            self.width
        }
    }

    pub fn decoder_in(&self) -> usize {
        self.width + self.dir_dim()
    }

    /// Stored scalars added by one scene.
    pub fn per_scene_parameters(&self) -> usize {
        (0..self.layers)
            .map(|l| {
                let base = if self.use_generator { self.noise_dim } else { self.layer_in(l) * self.rank };
                let coeff = if self.use_coefficients { self.rank * self.rank } else { 0 };
                base + coeff
            })
            .sum()
    }
}
