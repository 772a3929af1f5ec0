use super::encoding::encode_batch;
use super::ModelConfig;
use crate::error::Result;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Weight and bias handles of one dense layer on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

/// Tape handles for every layer of one scene's network.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub encoder: Vec<LayerVars>,
    pub decoder: [LayerVars; 2],
}

/// Density (`batch × 1`) and colour (`batch × 3`) outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub sigma: Var,
    pub rgb: Var,
}

/// Runs the radiance MLP for a batch of encoded inputs.
///
/// Hidden encoder layers use ReLU; the last encoder layer is linear and its
/// first output column is the raw density. The position encoding is
/// concatenated back in at `skip_layer`.
pub fn network_forward<T: Scalar>(
    tape: &mut Tape<T>,
    net: &NetVars,
    config: &ModelConfig,
    pos_enc: Var,
    dir_enc: Var,
) -> Result<FieldVars> {
    let mut h = pos_enc;
    let last = config.layers - 1;
    for (l, layer) in net.encoder.iter().enumerate() {
        let input = if l + 1 == config.skip_layer { tape.concat_cols(h, pos_enc)? } else { h };
        let y = tape.matmul(input, layer.weight)?;
        let y = tape.add_row(y, layer.bias)?;
        h = if l < last { tape.relu(y) } else { y };
    }
    let raw_sigma = tape.slice_cols(h, 0, 1)?;
    let sigma = tape.relu(raw_sigma);
    let feature = tape.slice_cols(h, 1, config.width + 1)?;

    let d_in = tape.concat_cols(feature, dir_enc)?;
    let [d1, d2] = net.decoder;
    let h2 = tape.matmul(d_in, d1.weight)?;
    let h2 = tape.add_row(h2, d1.bias)?;
    let h2 = tape.relu(h2);
    let out = tape.matmul(h2, d2.weight)?;
    let out = tape.add_row(out, d2.bias)?;
    let rgb = tape.sigmoid(out);
    Ok(FieldVars { sigma, rgb })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Plain MLP weights of one scene, pre-generated from the factorized model.
/// Queries through it cost the same as a conventional radiance MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterializedNet<T> {
    pub config: ModelConfig,
    pub encoder: Vec<DenseLayer<T>>,
    pub decoder: [DenseLayer<T>; 2],
}

impl<T: Scalar> MaterializedNet<T> {
    /// Registers the weights as constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> NetVars {
        let mut layer = |d: &DenseLayer<T>| LayerVars {
            weight: tape.constant(d.weight.clone()),
            bias: tape.constant(d.bias.clone()),
        };
        let encoder = self.encoder.iter().map(&mut layer).collect();
        let decoder = [layer(&self.decoder[0]), layer(&self.decoder[1])];
        NetVars { encoder, decoder }
    }

    /// Density and colour for a batch of points and unit directions.
    pub fn query(&self, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let net = self.bind(&mut tape);
        let px = tape.constant(encode_batch(points, self.config.pos_degrees));
        let pd = tape.constant(encode_batch(dirs, self.config.dir_degrees));
        let out = network_forward(&mut tape, &net, &self.config, px, pd)?;
        Ok((tape.value(out.sigma).clone(), tape.value(out.rgb).clone()))
    }

    /// Densities only; the direction input does not influence density.
    pub fn density(&self, points: &[[f64; 3]]) -> Result<Vec<T>> {
        let dirs = vec![[0.0, 0.0, 1.0]; points.len()];
        Ok(self.query(points, &dirs)?.0.into_data())
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.iter().chain(self.decoder.iter()).map(|d| d.weight.numel() + d.bias.numel()).sum()
    }
}
