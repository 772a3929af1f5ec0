//! The factorized multi-scene radiance network.
//!
//! Encoder layer `l` of scene `i` has weight `E = G_l(z_l^i) · (C_l^i · CM_l)`:
//! a per-layer hypernetwork `G_l` turns the scene's frozen noise vector into an
//! `in(l) × rank` matrix, which is multiplied by the scene's `rank × rank`
//! coefficient matrix and the shared `rank × out(l)` cross-scene matrix. The
//! decoder and the encoder biases are shared by every scene.

mod config;
mod encoding;
mod network;
mod params;

pub use config::ModelConfig;
pub use encoding::{encode_batch, positional_encode};
pub use network::{network_forward, DenseLayer, FieldVars, LayerVars, MaterializedNet, NetVars};
pub use params::{Binding, ParamGroup, ParamId};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Prng, Scalar, Tape, Tensor};
use crate::rendering::Camera;

/// Initial uncertainty weights β₁, β₂.
pub const INITIAL_BETA: [f64; 2] = [0.045, 0.06];

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub hidden: DenseLayer<T>,
    pub output: DenseLayer<T>,
}

/// Weights shared by all scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSceneWeights<T> {
    /// One `rank × out(l)` matrix per encoder layer.
    pub cross: Vec<Tensor<T>>,
    /// One `1 × out(l)` bias per encoder layer.
    pub bias: Vec<Tensor<T>>,
    pub decoder: Decoder<T>,
}

/// Two-layer hypernetwork `noise → in(l)·rank`, reshaped row-major to `in(l) × rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLayer<T> {
    pub hidden: DenseLayer<T>,
    pub output: DenseLayer<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterGenerator<T> {
    pub layers: Vec<GeneratorLayer<T>>,
}

/// Camera frusta and compositing settings recorded for a scene. No images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSetup {
    pub frusta: Vec<Camera>,
    pub near: f64,
    pub far: f64,
    pub white_background: bool,
}

/// Everything one scene adds to the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord<T> {
    pub id: String,
    /// Frozen `1 × noise_dim` vectors, one per layer (generator mode).
    pub noise: Vec<Tensor<T>>,
    /// Directly learned `in(l) × rank` matrices (generator disabled).
    pub direct: Vec<Tensor<T>>,
    /// Trainable `rank × rank` coefficient matrices, one per layer.
    pub coefficients: Vec<Tensor<T>>,
    pub setup: SceneSetup,
}

/// Parameter counts split into the per-scene and shared parts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub per_scene: Vec<usize>,
    pub generators: usize,
    pub cross_scene: usize,
    pub encoder_bias: usize,
    pub decoder: usize,
    pub uncertainty: usize,
}

impl ParameterCount {
    pub fn per_scene_total(&self) -> usize {
        self.per_scene.iter().sum()
    }

    pub fn shared(&self) -> usize {
        self.generators + self.cross_scene + self.encoder_bias + self.decoder + self.uncertainty
    }

    pub fn total(&self) -> usize {
        self.per_scene_total() + self.shared()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel<T> {
    config: ModelConfig,
    pub shared: CrossSceneWeights<T>,
    pub generators: ParameterGenerator<T>,
    scenes: Vec<SceneRecord<T>>,
    /// `ln β₁`, `ln β₂` as `1 × 1` tensors; the weights stay positive.
    pub log_beta: [Tensor<T>; 2],
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, prng: &mut Prng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(prng.uniform_in(-bound, bound))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn dense<T: Scalar>(fan_in: usize, fan_out: usize, prng: &mut Prng) -> DenseLayer<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DenseLayer {
        weight: uniform_tensor(&[fan_in, fan_out], bound, prng),
        bias: uniform_tensor(&[1, fan_out], bound, prng),
    }
}

impl<T: Scalar> FactorizedModel<T> {
    /// Fresh model with no scenes.
    pub fn new(config: ModelConfig, prng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let k = config.rank;
        let mut cross = Vec::new();
        let mut bias = Vec::new();
        let mut gens = Vec::new();
        for l in 0..config.layers {
            let (cin, cout) = (config.layer_in(l), config.layer_out(l));
            cross.push(uniform_tensor(&[k, cout], 1.0 / (k as f64).sqrt(), prng));
            bias.push(uniform_tensor(&[1, cout], 1.0 / (cin as f64).sqrt(), prng));
            if config.use_generator {
                gens.push(GeneratorLayer {
                    hidden: dense(config.noise_dim, config.generator_hidden, prng),
                    output: dense(config.generator_hidden, cin * k, prng),
                });
            }
        }
        let decoder = Decoder {
            hidden: dense(config.decoder_in(), config.decoder_hidden, prng),
            output: dense(config.decoder_hidden, 3, prng),
        };
        let log_beta = INITIAL_BETA.map(|b| Tensor::scalar(T::lit(b.ln())));
        Ok(Self {
            config,
            shared: CrossSceneWeights { cross, bias, decoder },
            generators: ParameterGenerator { layers: gens },
            scenes: Vec::new(),
            log_beta,
        })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        shared: CrossSceneWeights<T>,
        generators: ParameterGenerator<T>,
        scenes: Vec<SceneRecord<T>>,
        log_beta: [Tensor<T>; 2],
    ) -> Result<Self> {
        config.validate()?;
        let model = Self { config, shared, generators, scenes, log_beta };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let k = c.rank;
        let expect = |t: &Tensor<T>, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Format(format!("{what}: expected shape {shape:?}, found {:?}", t.shape())));
            }
            Ok(())
        };
        if self.shared.cross.len() != c.layers || self.shared.bias.len() != c.layers {
            return Err(Error::Format("layer count mismatch".into()));
        }
        for l in 0..c.layers {
            expect(&self.shared.cross[l], &[k, c.layer_out(l)], "cross-scene matrix")?;
            expect(&self.shared.bias[l], &[1, c.layer_out(l)], "encoder bias")?;
        }
        let gl = if c.use_generator { c.layers } else { 0 };
        if self.generators.layers.len() != gl {
            return Err(Error::Format("generator layer count mismatch".into()));
        }
        for (l, g) in self.generators.layers.iter().enumerate() {
            expect(&g.hidden.weight, &[c.noise_dim, c.generator_hidden], "generator")?;
            expect(&g.output.weight, &[c.generator_hidden, c.layer_in(l) * k], "generator")?;
        }
        for s in &self.scenes {
            let (nn, nd, nc) = (
                if c.use_generator { c.layers } else { 0 },
                if c.use_generator { 0 } else { c.layers },
                if c.use_coefficients { c.layers } else { 0 },
            );
            if s.noise.len() != nn || s.direct.len() != nd || s.coefficients.len() != nc {
                return Err(Error::Format(format!("scene `{}` layer count mismatch", s.id)));
            }
            for t in &s.noise {
                expect(t, &[1, c.noise_dim], "noise")?;
            }
            for (l, t) in s.direct.iter().enumerate() {
                expect(t, &[c.layer_in(l), k], "scene matrix")?;
            }
            for t in &s.coefficients {
                expect(t, &[k, k], "coefficient matrix")?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scenes(&self) -> &[SceneRecord<T>] {
        &self.scenes
    }

    pub fn scene_index(&self, id: &str) -> Result<usize> {
        self.scenes.iter().position(|s| s.id == id).ok_or_else(|| Error::UnknownScene(id.to_string()))
    }

    pub fn scene(&self, id: &str) -> Result<&SceneRecord<T>> {
        Ok(&self.scenes[self.scene_index(id)?])
    }

    pub fn beta(&self) -> [T; 2] {
        [self.log_beta[0].item().exp(), self.log_beta[1].item().exp()]
    }

    /// Registers a new scene: draws its noise from N(0, 1) and starts its
    /// coefficient matrices at identity plus N(0, 0.01²) jitter. Shared weights
    /// are untouched.
    pub fn add_scene(&mut self, id: &str, setup: SceneSetup, prng: &mut Prng) -> Result<&SceneRecord<T>> {
        if self.scenes.iter().any(|s| s.id == id) {
            return Err(Error::DuplicateScene(id.to_string()));
        }
        if id.is_empty() {
            return Err(Error::contract("scene id must not be empty"));
        }
        if !(setup.near > 0.0 && setup.far > setup.near) {
            return Err(Error::contract("scene needs 0 < near < far"));
        }
        for cam in &setup.frusta {
            cam.validate()?;
        }
        let c = &self.config;
        let k = c.rank;
        let mut noise = Vec::new();
        let mut direct = Vec::new();
        let mut coefficients = Vec::new();
        for l in 0..c.layers {
            if c.use_generator {
                let z = (0..c.noise_dim).map(|_| T::lit(prng.normal())).collect();
                noise.push(Tensor::from_vec(&[1, c.noise_dim], z)?);
            } else {
                // Same spread as a freshly initialized generator's output.
                direct.push(uniform_tensor(&[c.layer_in(l), k], 1.0 / 6f64.sqrt(), prng));
            }
            if c.use_coefficients {
                let mut m = Tensor::identity(k);
                for v in m.data_mut() {
                    *v += T::lit(0.01 * prng.normal());
                }
                coefficients.push(m);
            }
        }
        self.scenes.push(SceneRecord { id: id.to_string(), noise, direct, coefficients, setup });
        Ok(self.scenes.last().expect("just pushed"))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        let s = &self.shared;
        match id {
            ParamId::CrossScene(l) => s.cross.get(l),
            ParamId::EncoderBias(l) => s.bias.get(l),
            ParamId::GeneratorW1(l) => self.generators.layers.get(l).map(|g| &g.hidden.weight),
            ParamId::GeneratorB1(l) => self.generators.layers.get(l).map(|g| &g.hidden.bias),
            ParamId::GeneratorW2(l) => self.generators.layers.get(l).map(|g| &g.output.weight),
            ParamId::GeneratorB2(l) => self.generators.layers.get(l).map(|g| &g.output.bias),
            ParamId::DecoderW1 => Some(&s.decoder.hidden.weight),
            ParamId::DecoderB1 => Some(&s.decoder.hidden.bias),
            ParamId::DecoderW2 => Some(&s.decoder.output.weight),
            ParamId::DecoderB2 => Some(&s.decoder.output.bias),
            ParamId::Coefficient { scene, layer } => self.scenes.get(scene).and_then(|r| r.coefficients.get(layer)),
            ParamId::DirectSswm { scene, layer } => self.scenes.get(scene).and_then(|r| r.direct.get(layer)),
            ParamId::LogBeta(i) => self.log_beta.get(i),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        let s = &mut self.shared;
        let g = &mut self.generators.layers;
        match id {
            ParamId::CrossScene(l) => s.cross.get_mut(l),
            ParamId::EncoderBias(l) => s.bias.get_mut(l),
            ParamId::GeneratorW1(l) => g.get_mut(l).map(|g| &mut g.hidden.weight),
            ParamId::GeneratorB1(l) => g.get_mut(l).map(|g| &mut g.hidden.bias),
            ParamId::GeneratorW2(l) => g.get_mut(l).map(|g| &mut g.output.weight),
            ParamId::GeneratorB2(l) => g.get_mut(l).map(|g| &mut g.output.bias),
            ParamId::DecoderW1 => Some(&mut s.decoder.hidden.weight),
            ParamId::DecoderB1 => Some(&mut s.decoder.hidden.bias),
            ParamId::DecoderW2 => Some(&mut s.decoder.output.weight),
            ParamId::DecoderB2 => Some(&mut s.decoder.output.bias),
            ParamId::Coefficient { scene, layer } => {
                self.scenes.get_mut(scene).and_then(|r| r.coefficients.get_mut(layer))
            }
            ParamId::DirectSswm { scene, layer } => self.scenes.get_mut(scene).and_then(|r| r.direct.get_mut(layer)),
            ParamId::LogBeta(i) => self.log_beta.get_mut(i),
        }
    }

    /// Every learnable tensor (noise vectors excluded), in a stable order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let c = &self.config;
        let mut ids = Vec::new();
        for l in 0..c.layers {
            ids.push(ParamId::CrossScene(l));
            ids.push(ParamId::EncoderBias(l));
        }
        for l in 0..self.generators.layers.len() {
            ids.extend([
                ParamId::GeneratorW1(l),
                ParamId::GeneratorB1(l),
                ParamId::GeneratorW2(l),
                ParamId::GeneratorB2(l),
            ]);
        }
        ids.extend([ParamId::DecoderW1, ParamId::DecoderB1, ParamId::DecoderW2, ParamId::DecoderB2]);
        for (scene, r) in self.scenes.iter().enumerate() {
            ids.extend((0..r.direct.len()).map(|layer| ParamId::DirectSswm { scene, layer }));
            ids.extend((0..r.coefficients.len()).map(|layer| ParamId::Coefficient { scene, layer }));
        }
        ids.extend([ParamId::LogBeta(0), ParamId::LogBeta(1)]);
        ids
    }

    /// Human-readable parameter path, e.g. `scene[lego].coefficient[3]`.
    pub fn param_path(&self, id: ParamId) -> String {
        let scene_name = |i: usize| self.scenes.get(i).map_or("?", |s| s.id.as_str()).to_string();
        match id {
            ParamId::CrossScene(l) => format!("cross_scene[{l}]"),
            ParamId::EncoderBias(l) => format!("encoder_bias[{l}]"),
            ParamId::GeneratorW1(l) => format!("generator[{l}].hidden.weight"),
            ParamId::GeneratorB1(l) => format!("generator[{l}].hidden.bias"),
            ParamId::GeneratorW2(l) => format!("generator[{l}].output.weight"),
            ParamId::GeneratorB2(l) => format!("generator[{l}].output.bias"),
            ParamId::DecoderW1 => "decoder.hidden.weight".into(),
            ParamId::DecoderB1 => "decoder.hidden.bias".into(),
            ParamId::DecoderW2 => "decoder.output.weight".into(),
            ParamId::DecoderB2 => "decoder.output.bias".into(),
            ParamId::Coefficient { scene, layer } => {
                format!("scene[{}].coefficient[{layer}]", scene_name(scene))
            }
            ParamId::DirectSswm { scene, layer } => {
                format!("scene[{}].scene_matrix[{layer}]", scene_name(scene))
            }
            ParamId::LogBeta(i) => format!("log_beta[{i}]"),
        }
    }

    /// Builds the encoder weights of scene `scene` on the tape and returns the
    /// handles of the full network. Differentiable with respect to every bound
    /// trainable parameter.
    pub fn scene_net(&self, tape: &mut Tape<T>, binding: &mut Binding<'_>, scene: usize) -> Result<NetVars> {
        let c = &self.config;
        let record = self.scenes.get(scene).ok_or_else(|| Error::UnknownScene(format!("#{scene}")))?;
        let mut encoder = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let weight = self.layer_weight(tape, binding, record, scene, l)?;
            let bias = binding.var(tape, self, ParamId::EncoderBias(l));
            encoder.push(LayerVars { weight, bias });
        }
        let decoder = [
            LayerVars {
                weight: binding.var(tape, self, ParamId::DecoderW1),
                bias: binding.var(tape, self, ParamId::DecoderB1),
            },
            LayerVars {
                weight: binding.var(tape, self, ParamId::DecoderW2),
                bias: binding.var(tape, self, ParamId::DecoderB2),
            },
        ];
        Ok(NetVars { encoder, decoder })
    }

    fn layer_weight(
        &self,
        tape: &mut Tape<T>,
        binding: &mut Binding<'_>,
        record: &SceneRecord<T>,
        scene: usize,
        l: usize,
    ) -> Result<crate::numerics::Var> {
        let c = &self.config;
        let sswm = if c.use_generator {
            let z = tape.constant(record.noise[l].clone());
            let w1 = binding.var(tape, self, ParamId::GeneratorW1(l));
            let b1 = binding.var(tape, self, ParamId::GeneratorB1(l));
            let w2 = binding.var(tape, self, ParamId::GeneratorW2(l));
            let b2 = binding.var(tape, self, ParamId::GeneratorB2(l));
            let h = tape.matmul(z, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.relu(h);
            let o = tape.matmul(h, w2)?;
            let o = tape.add_row(o, b2)?;
            tape.reshape(o, &[c.layer_in(l), c.rank])?
        } else {
            binding.var(tape, self, ParamId::DirectSswm { scene, layer: l })
        };
        let cross = binding.var(tape, self, ParamId::CrossScene(l));
        let mixed = if c.use_coefficients {
            let coeff = binding.var(tape, self, ParamId::Coefficient { scene, layer: l });
            tape.matmul(coeff, cross)?
        } else {
            cross
        };
        tape.matmul(sswm, mixed)
    }

    /// Generated encoder weight of layer `l` for a scene, `in(l) × out(l)`.
    pub fn generate_scene_weights(&self, scene_id: &str, l: usize) -> Result<Tensor<T>> {
        let scene = self.scene_index(scene_id)?;
        if l >= self.config.layers {
            return Err(Error::contract(format!("layer {l} out of range")));
        }
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let w = self.layer_weight(&mut tape, &mut binding, &self.scenes[scene], scene, l)?;
        Ok(tape.value(w).clone())
    }

    /// Pre-generates the plain MLP of one scene.
    pub fn materialize(&self, scene_id: &str) -> Result<MaterializedNet<T>> {
        let scene = self.scene_index(scene_id)?;
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let net = self.scene_net(&mut tape, &mut binding, scene)?;
        let take =
            |lv: &LayerVars| DenseLayer { weight: tape.value(lv.weight).clone(), bias: tape.value(lv.bias).clone() };
        Ok(MaterializedNet {
            config: self.config.clone(),
            encoder: net.encoder.iter().map(take).collect(),
            decoder: [take(&net.decoder[0]), take(&net.decoder[1])],
        })
    }

    /// Density and colour at one point through the factorized path.
    pub fn forward(&self, scene_id: &str, x: [f64; 3], d: [f64; 3]) -> Result<(T, [T; 3])> {
        let (s, c) = self.query(scene_id, &[x], &[d])?;
        let c = c.data();
        Ok((s.item(), [c[0], c[1], c[2]]))
    }

    /// Batched query through the factorized path. Directions must be unit length.
    pub fn query(&self, scene_id: &str, points: &[[f64; 3]], dirs: &[[f64; 3]]) -> Result<(Tensor<T>, Tensor<T>)> {
        let scene = self.scene_index(scene_id)?;
        if points.len() != dirs.len() || points.is_empty() {
            return Err(Error::contract("points and directions must be non-empty and paired"));
        }
        for d in dirs {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("direction {d:?} is not unit length")));
            }
        }
        let mut tape = Tape::new();
        let mut binding = Binding::frozen();
        let net = self.scene_net(&mut tape, &mut binding, scene)?;
        let px = tape.constant(encode_batch(points, self.config.pos_degrees));
        let pd = tape.constant(encode_batch(dirs, self.config.dir_degrees));
        let out = network_forward(&mut tape, &net, &self.config, px, pd)?;
        Ok((tape.value(out.sigma).clone(), tape.value(out.rgb).clone()))
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let per_scene = self
            .scenes
            .iter()
            .map(|s| s.noise.iter().chain(&s.direct).chain(&s.coefficients).map(Tensor::numel).sum())
            .collect();
        let dense = |d: &DenseLayer<T>| d.weight.numel() + d.bias.numel();
        ParameterCount {
            per_scene,
            generators: self.generators.layers.iter().map(|g| dense(&g.hidden) + dense(&g.output)).sum(),
            cross_scene: self.shared.cross.iter().map(Tensor::numel).sum(),
            encoder_bias: self.shared.bias.iter().map(Tensor::numel).sum(),
            decoder: dense(&self.shared.decoder.hidden) + dense(&self.shared.decoder.output),
            uncertainty: 2,
        }
    }

    /// Rounds every stored value to 32-bit precision, so that what is in memory
    /// is exactly what a saved model file reloads to.
    pub fn round_to_storage(&mut self) {
        let round_t = |t: &mut Tensor<T>| {
            for v in t.data_mut() {
                *v = T::lit(v.to_f64_lossy() as f32 as f64);
            }
        };
        for id in self.param_ids() {
            if let Some(t) = self.param_mut(id) {
                round_t(t);
            }
        }
        let r = |v: &mut f64| *v = *v as f32 as f64;
        for s in &mut self.scenes {
            s.noise.iter_mut().for_each(round_t);
            r(&mut s.setup.near);
            r(&mut s.setup.far);
            for cam in &mut s.setup.frusta {
                cam.rotation.iter_mut().flatten().for_each(r);
                cam.position.iter_mut().for_each(r);
                r(&mut cam.intrinsics.fov_x);
            }
        }
    }
}
