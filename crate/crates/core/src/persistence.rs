//! Binary model file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! header   "SCRF" | version u32 | 9 × u32 config | flags u32 | scene count u32
//! shared   per layer: cross-scene matrix, encoder bias
//!          per layer: generator hidden weight, bias, output weight, bias
//!          decoder hidden weight, bias, output weight, bias | ln β₁, ln β₂
//! scenes   id length u32 | id UTF-8 | noise vectors | direct matrices | coefficients
//!          | near f32 | far f32 | background u8 | frustum count u32
//!          | per frustum: rotation 9 × f32, position 3 × f32, width u32, height u32, fov_x f32
//! ```
//!
//! Every tensor is stored row-major as f32 with its shape implied by the config.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{
    CrossSceneWeights, Decoder, DenseLayer, FactorizedModel, GeneratorLayer, ModelConfig, ParameterGenerator,
    SceneRecord, SceneSetup,
};
use crate::numerics::{Scalar, Tensor};
use crate::rendering::{Camera, Intrinsics};

pub const MAGIC: &[u8; 4] = b"SCRF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 9 * 4 + 4 + 4;
const FRUSTUM_BYTES: usize = 12 * 4 + 4 + 4 + 4;
const FLAG_COEFFICIENTS: u32 = 1;
const FLAG_GENERATOR: u32 = 2;

/// Bytes of the shared block.
pub fn shared_bytes(config: &ModelConfig) -> usize {
    let k = config.rank;
    let mut n = 0;
    for l in 0..config.layers {
        n += (k + 1) * config.layer_out(l);
        if config.use_generator {
            let h = config.generator_hidden;
            n += (config.noise_dim + 1) * h + (h + 1) * config.layer_in(l) * k;
        }
    }
    n += (config.decoder_in() + 1) * config.decoder_hidden + (config.decoder_hidden + 1) * 3;
    4 * (n + 2)
}

/// Bytes of one scene record.
pub fn scene_record_bytes(config: &ModelConfig, id: &str, frusta: usize) -> usize {
    4 + id.len() + 4 * config.per_scene_parameters() + 4 + 4 + 1 + 4 + frusta * FRUSTUM_BYTES
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        for &v in t.data() {
            self.f32(v.to_f64_lossy());
        }
    }

    fn dense<T: Scalar>(&mut self, d: &DenseLayer<T>) {
        self.tensor(&d.weight);
        self.tensor(&d.bias);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.f32().map(T::lit)).collect::<Result<_>>()?;
        Tensor::from_vec(shape, data)
    }

    fn dense<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Result<DenseLayer<T>> {
        Ok(DenseLayer { weight: self.tensor(&[fan_in, fan_out])?, bias: self.tensor(&[1, fan_out])? })
    }
}

/// Canonical serialization. Values are rounded to f32; see
/// [`FactorizedModel::round_to_storage`] for making the in-memory model agree.
pub fn to_bytes<T: Scalar>(model: &FactorizedModel<T>) -> Vec<u8> {
    let c = model.config();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION as usize);
    for v in [
        c.layers,
        c.width,
        c.rank,
        c.noise_dim,
        c.pos_degrees,
        c.dir_degrees,
        c.skip_layer,
        c.decoder_hidden,
        c.generator_hidden,
    ] {
        w.u32(v);
    }
    let flags =
        if c.use_coefficients { FLAG_COEFFICIENTS } else { 0 } | if c.use_generator { FLAG_GENERATOR } else { 0 };
    w.u32(flags as usize);
    w.u32(model.scenes().len());

    for l in 0..c.layers {
        w.tensor(&model.shared.cross[l]);
        w.tensor(&model.shared.bias[l]);
    }
    for g in &model.generators.layers {
        w.dense(&g.hidden);
        w.dense(&g.output);
    }
    w.dense(&model.shared.decoder.hidden);
    w.dense(&model.shared.decoder.output);
    w.tensor(&model.log_beta[0]);
    w.tensor(&model.log_beta[1]);

    for s in model.scenes() {
        w.u32(s.id.len());
        w.0.extend_from_slice(s.id.as_bytes());
        for t in s.noise.iter().chain(&s.direct).chain(&s.coefficients) {
            w.tensor(t);
        }
        w.f32(s.setup.near);
        w.f32(s.setup.far);
        w.0.push(s.setup.white_background as u8);
        w.u32(s.setup.frusta.len());
        for cam in &s.setup.frusta {
            for v in cam.rotation.iter().flatten().chain(&cam.position) {
                w.f32(*v);
            }
            w.u32(cam.intrinsics.width);
            w.u32(cam.intrinsics.height);
            w.f32(cam.intrinsics.fov_x);
        }
    }
    w.0
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<FactorizedModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing SCRF magic".into()));
    }
    let version = r.u32()?;
    if version as u32 > FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {version} is newer than the supported version {FORMAT_VERSION}"
        )));
    }
    if version == 0 {
        return Err(Error::Format("format version 0 is invalid".into()));
    }
    let mut v = [0usize; 9];
    for x in &mut v {
        *x = r.u32()?;
    }
    let flags = r.u32()? as u32;
    if flags & !(FLAG_COEFFICIENTS | FLAG_GENERATOR) != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#x}")));
    }
    let config = ModelConfig {
        layers: v[0],
        width: v[1],
        rank: v[2],
        noise_dim: v[3],
        pos_degrees: v[4],
        dir_degrees: v[5],
        skip_layer: v[6],
        decoder_hidden: v[7],
        generator_hidden: v[8],
        use_coefficients: flags & FLAG_COEFFICIENTS != 0,
        use_generator: flags & FLAG_GENERATOR != 0,
    };
    config.validate().map_err(|e| Error::Format(format!("header config: {e}")))?;
    let scene_count = r.u32()?;
    let k = config.rank;

    let mut cross = Vec::new();
    let mut bias = Vec::new();
    for l in 0..config.layers {
        cross.push(r.tensor(&[k, config.layer_out(l)])?);
        bias.push(r.tensor(&[1, config.layer_out(l)])?);
    }
    let mut layers = Vec::new();
    if config.use_generator {
        for l in 0..config.layers {
            layers.push(GeneratorLayer {
                hidden: r.dense(config.noise_dim, config.generator_hidden)?,
                output: r.dense(config.generator_hidden, config.layer_in(l) * k)?,
            });
        }
    }
    let decoder = Decoder {
        hidden: r.dense(config.decoder_in(), config.decoder_hidden)?,
        output: r.dense(config.decoder_hidden, 3)?,
    };
    let log_beta = [r.tensor(&[1, 1])?, r.tensor(&[1, 1])?];

    let mut scenes = Vec::with_capacity(scene_count);
    for _ in 0..scene_count {
        let len = r.u32()?;
        let id =
            std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("scene id is not UTF-8".into()))?.to_string();
        let mut noise = Vec::new();
        let mut direct = Vec::new();
        let mut coefficients = Vec::new();
        if config.use_generator {
            for _ in 0..config.layers {
                noise.push(r.tensor(&[1, config.noise_dim])?);
            }
        }
        if !config.use_generator {
            for l in 0..config.layers {
                direct.push(r.tensor(&[config.layer_in(l), k])?);
            }
        }
        if config.use_coefficients {
            for _ in 0..config.layers {
                coefficients.push(r.tensor(&[k, k])?);
            }
        }
        let near = r.f32()?;
        let far = r.f32()?;
        let white_background = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("invalid background flag {b}"))),
        };
        let count = r.u32()?;
        let mut frusta = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut rot = [[0.0; 3]; 3];
            for row in &mut rot {
                for x in row.iter_mut() {
                    *x = r.f32()?;
                }
            }
            let position = [r.f32()?, r.f32()?, r.f32()?];
            let intrinsics = Intrinsics { width: r.u32()?, height: r.u32()?, fov_x: r.f32()? };
            // Rounded rotations are orthonormal only to f32 precision, well inside
            // the validation tolerance.
            frusta.push(Camera::new(rot, position, intrinsics).map_err(|e| Error::Format(e.to_string()))?);
        }
        scenes.push(SceneRecord {
            id,
            noise,
            direct,
            coefficients,
            setup: SceneSetup { frusta, near, far, white_background },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    FactorizedModel::from_parts(
        config,
        CrossSceneWeights { cross, bias, decoder },
        ParameterGenerator { layers },
        scenes,
        log_beta,
    )
}

/// Writes to a temporary sibling and renames it into place, so an interrupted
/// write never leaves a partial model file behind.
pub fn save<T: Scalar>(model: &FactorizedModel<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<FactorizedModel<T>> {
    from_bytes(&fs::read(path)?)
}
