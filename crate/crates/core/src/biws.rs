//! Bi-branch weight-sharing supernet.
//!
//! Every layer keeps a full attention branch (projections for all four input
//! nodes plus the output projection) and a full convolution branch (GLU
//! projection and a 65-tap kernel). Smaller kernels are the centered slice of
//! the big one mapped through a per-layer `k×k` transform. Parameters outside
//! the two branches live in a shared store.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::model::{names, param_layout, Init, Model, ModelConfig, ModelError, INIT_STD};
use crate::search_space::{BackboneSpec, InputNode, LayerSpec, KERNEL_MENU, MAX_KERNEL};
use crate::tensor::{ParamSet, Tensor};

/// Transforms whose condition number exceeds this are inverted with a pseudo-inverse.
pub const CONDITION_LIMIT: f64 = 1e8;
const CENTER: usize = (MAX_KERNEL - 1) / 2;

#[derive(Debug, Error)]
pub enum BiwsError {
    #[error("kernel size {0} is not in the menu")]
    Kernel(usize),
    #[error("layer {0} does not exist")]
    Layer(usize),
    #[error("no attention inputs requested")]
    NoInputs,
    #[error("shape mismatch for {what}: expected {expected:?}, got {found:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("bad supernet checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, BiwsError>;

/// Rows of the 65-tap kernel that seed a `k`-tap kernel.
pub fn center_rows(k: usize) -> std::ops::RangeInclusive<usize> {
    CENTER - (k - 1) / 2..=CENTER + (k - 1) / 2
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetLayer {
    /// Projections for Q, K, V, P in that order, each `d×d`.
    pub proj: [Tensor; 4],
    pub w_o: Tensor,
    pub w_glu: Tensor,
    /// `65×d`.
    pub kernel: Tensor,
    /// One `k×k` transform per kernel size below the maximum.
    pub transforms: BTreeMap<usize, Tensor>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub proj: Vec<(InputNode, Tensor)>,
    pub w_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    cfg: ModelConfig,
    seed: u64,
    layers: Vec<SupernetLayer>,
    shared: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct SupernetMeta {
    config: ModelConfig,
    seed: u64,
    versions: Vec<u64>,
}

fn check_shape(what: impl Into<String>, t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(BiwsError::Shape {
            what: what.into(),
            expected: expected.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

fn shared_slots(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.ffn_ratio * d;
    let mut out = vec![
        (names::TOKEN_EMBED.to_string(), vec![cfg.vocab, d], Init::Normal(INIT_STD)),
        (names::POS_EMBED.to_string(), vec![cfg.seq_len, d], Init::Normal(INIT_STD)),
        (names::EMBED_LN_GAIN.to_string(), vec![d], Init::Ones),
        (names::EMBED_LN_BIAS.to_string(), vec![d], Init::Zeros),
    ];
    for l in 0..cfg.num_layers {
        let lns = [names::ln1(l), names::ln2(l), names::conv_ln(l)];
        for (g, b) in lns {
            out.push((g, vec![d], Init::Ones));
            out.push((b, vec![d], Init::Zeros));
        }
        let (w1, w2) = names::ffn(l);
        out.push((w1, vec![d, f], Init::Normal(INIT_STD)));
        out.push((w2, vec![f, d], Init::Normal(INIT_STD)));
    }
    out
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().expect("matrix");
    DMatrix::from_row_slice(r, c, t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let data: Vec<f64> = m.transpose().as_slice().to_vec();
    Tensor::new(vec![m.nrows(), m.ncols()], data).expect("matrix shape")
}

/// `T⁻¹`, or the pseudo-inverse when `T` is ill-conditioned.
fn robust_inverse(t: &Tensor) -> DMatrix<f64> {
    let m = to_matrix(t);
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || max / min > CONDITION_LIMIT {
        warn!("transform condition number {:.3e} exceeds limit, using pseudo-inverse", max / min);
        return m.pseudo_inverse(1e-12).expect("non-negative epsilon");
    }
    m.try_inverse().expect("well-conditioned matrix is invertible")
}

impl Supernet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let normal = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::randn(shape, INIT_STD, rng);
        let layers = (0..cfg.num_layers)
            .map(|_| SupernetLayer {
                proj: std::array::from_fn(|_| normal(&[d, d], &mut rng)),
                w_o: normal(&[d, d], &mut rng),
                w_glu: normal(&[d, 2 * d], &mut rng),
                kernel: normal(&[MAX_KERNEL, d], &mut rng),
                transforms: KERNEL_MENU
                    .iter()
                    .filter(|&&k| k < MAX_KERNEL)
                    .map(|&k| (k, Tensor::identity(k)))
                    .collect(),
                version: 0,
            })
            .collect();
        let shared = shared_slots(cfg)
            .into_iter()
            .map(|(name, shape, init)| (name, init.tensor(&shape, &mut rng)))
            .collect();
        Ok(Self {
            cfg: *cfg,
            seed,
            layers,
            shared,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer(&self, l: usize) -> Result<&SupernetLayer> {
        self.layers.get(l).ok_or(BiwsError::Layer(l))
    }

    fn layer_mut(&mut self, l: usize) -> Result<&mut SupernetLayer> {
        self.layers.get_mut(l).ok_or(BiwsError::Layer(l))
    }

    pub fn versions(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.version).collect()
    }

    pub fn shared(&self) -> &BTreeMap<String, Tensor> {
        &self.shared
    }

    /// Raw center slice of the stored kernel.
    pub fn conv_slice(&self, l: usize, k: usize) -> Result<Tensor> {
        if !KERNEL_MENU.contains(&k) {
            return Err(BiwsError::Kernel(k));
        }
        let layer = self.layer(l)?;
        let d = self.cfg.d_model;
        let rows = center_rows(k);
        let data = layer.kernel.data()[rows.start() * d..(rows.end() + 1) * d].to_vec();
        Ok(Tensor::new(vec![k, d], data).expect("slice shape"))
    }

    pub fn transform(&self, l: usize, k: usize) -> Result<Option<&Tensor>> {
        if !KERNEL_MENU.contains(&k) {
            return Err(BiwsError::Kernel(k));
        }
        Ok(self.layer(l)?.transforms.get(&k))
    }

    /// The `k×d` kernel a candidate starts from: transform · center slice.
    pub fn extract_conv_kernel(&self, l: usize, k: usize) -> Result<Tensor> {
        let slice = self.conv_slice(l, k)?;
        Ok(match self.transform(l, k)? {
            Some(t) => from_matrix(&(to_matrix(t) * to_matrix(&slice))),
            None => slice,
        })
    }

    pub fn extract_attention_weights(&self, l: usize, used: &[InputNode]) -> Result<AttentionWeights> {
        if used.is_empty() {
            return Err(BiwsError::NoInputs);
        }
        let layer = self.layer(l)?;
        Ok(AttentionWeights {
            proj: used.iter().map(|&i| (i, layer.proj[i.index()].clone())).collect(),
            w_o: layer.w_o.clone(),
        })
    }

    pub fn write_back_attention(&mut self, l: usize, weights: &AttentionWeights) -> Result<()> {
        let d = self.cfg.d_model;
        for (i, t) in &weights.proj {
            check_shape(format!("layer {l} projection {i}"), t, &[d, d])?;
        }
        check_shape(format!("layer {l} output projection"), &weights.w_o, &[d, d])?;
        let layer = self.layer_mut(l)?;
        for (i, t) in &weights.proj {
            layer.proj[i.index()] = t.clone();
        }
        layer.w_o = weights.w_o.clone();
        layer.version += 1;
        Ok(())
    }

    /// Stores a trained `k×d` kernel. For `k` below the maximum the (optionally
    /// refreshed) transform is kept and its inverse applied to the kernel
    /// before it replaces the center slice.
    pub fn write_back_conv(&mut self, l: usize, k: usize, kernel: &Tensor, transform: Option<&Tensor>) -> Result<()> {
        if !KERNEL_MENU.contains(&k) {
            return Err(BiwsError::Kernel(k));
        }
        let d = self.cfg.d_model;
        check_shape(format!("layer {l} kernel"), kernel, &[k, d])?;
        if let Some(t) = transform {
            check_shape(format!("layer {l} transform"), t, &[k, k])?;
        }
        let layer = self.layer_mut(l)?;
        let slice = if k == MAX_KERNEL {
            kernel.clone()
        } else {
            if let Some(t) = transform {
                layer.transforms.insert(k, t.clone());
            }
            let inv = robust_inverse(&layer.transforms[&k]);
            from_matrix(&(inv * to_matrix(kernel)))
        };
        let rows = center_rows(k);
        layer.kernel.data_mut()[rows.start() * d..(rows.end() + 1) * d].copy_from_slice(slice.data());
        layer.version += 1;
        Ok(())
    }

    pub fn write_back_glu(&mut self, l: usize, w_glu: &Tensor) -> Result<()> {
        let d = self.cfg.d_model;
        check_shape(format!("layer {l} GLU projection"), w_glu, &[d, 2 * d])?;
        self.layer_mut(l)?.w_glu = w_glu.clone();
        Ok(())
    }

    /// Parameters for a candidate, every value copied out of the supernet.
    /// Conv layers below the maximum kernel get a factored kernel whose
    /// product equals [`Supernet::extract_conv_kernel`].
    pub fn init_candidate(&self, spec: &BackboneSpec) -> Result<ParamSet> {
        if spec.len() != self.cfg.num_layers {
            return Err(BiwsError::Checkpoint(format!(
                "spec has {} layers, supernet {}",
                spec.len(),
                self.cfg.num_layers
            )));
        }
        let mut values: BTreeMap<String, Tensor> = self.shared.clone();
        for (l, layer) in spec.layers.iter().enumerate() {
            let sl = self.layer(l)?;
            match layer {
                LayerSpec::Attention(dag) => {
                    for &i in dag.inputs() {
                        values.insert(names::proj(l, i), sl.proj[i.index()].clone());
                    }
                    values.insert(names::w_o(l), sl.w_o.clone());
                }
                LayerSpec::Conv(k) => {
                    values.insert(names::w_glu(l), sl.w_glu.clone());
                    values.insert(names::kernel(l), self.conv_slice(l, *k)?);
                    if let Some(t) = self.transform(l, *k)? {
                        values.insert(names::transform(l), t.clone());
                    }
                }
            }
        }
        let mut params = ParamSet::new();
        for slot in param_layout(spec, &self.cfg, true) {
            let t = values.remove(&slot.name).ok_or_else(|| BiwsError::Checkpoint(format!("no value for {}", slot.name)))?;
            check_shape(slot.name.clone(), &t, &slot.shape)?;
            params
                .insert(slot.name, t)
                .map_err(|e| BiwsError::Model(ModelError::Tensor(e)))?;
        }
        Ok(params)
    }

    /// Copies a trained candidate's weights into the supernet; each layer's
    /// version advances by one.
    pub fn write_back_candidate(&mut self, model: &Model) -> Result<()> {
        let spec = model.spec().clone();
        let value = |name: &str| -> Result<Tensor> {
            model
                .params
                .value(name)
                .cloned()
                .ok_or_else(|| BiwsError::Checkpoint(format!("candidate lacks {name}")))
        };
        for (l, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Attention(dag) => {
                    let proj = dag
                        .inputs()
                        .iter()
                        .map(|&i| Ok((i, value(&names::proj(l, i))?)))
                        .collect::<Result<Vec<_>>>()?;
                    self.write_back_attention(l, &AttentionWeights { proj, w_o: value(&names::w_o(l))? })?;
                }
                LayerSpec::Conv(k) => {
                    self.write_back_glu(l, &value(&names::w_glu(l))?)?;
                    let kernel = model.effective_kernel(l).ok_or(BiwsError::Layer(l))?;
                    let transform = model.params.value(&names::transform(l)).cloned();
                    self.write_back_conv(l, *k, &kernel, transform.as_ref())?;
                }
            }
        }
        for p in model.params.iter() {
            if let Some(slot) = self.shared.get_mut(&p.name) {
                check_shape(p.name.clone(), &p.value, slot.shape())?;
                *slot = p.value.clone();
            }
        }
        Ok(())
    }

    /// Arrays in declared order: per layer `w_q, w_k, w_v, w_p, w_o, w_glu,
    /// kernel, transform{k}` for ascending `k`, then shared arrays by name.
    pub fn to_container(&self) -> Container {
        let mut arrays = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for i in InputNode::ALL {
                arrays.push((names::proj(l, i), layer.proj[i.index()].clone()));
            }
            arrays.push((names::w_o(l), layer.w_o.clone()));
            arrays.push((names::w_glu(l), layer.w_glu.clone()));
            arrays.push((names::kernel(l), layer.kernel.clone()));
            for (k, t) in &layer.transforms {
                arrays.push((format!("{}{k}", names::transform(l)), t.clone()));
            }
        }
        for (name, t) in &self.shared {
            arrays.push((name.clone(), t.clone()));
        }
        let meta = SupernetMeta {
            config: self.cfg,
            seed: self.seed,
            versions: self.versions(),
        };
        Container {
            kind: "supernet".into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            arrays,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "supernet" {
            return Err(BiwsError::Checkpoint(format!("container holds a {:?}, not a supernet", c.kind)));
        }
        let meta: SupernetMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| BiwsError::Checkpoint(e.to_string()))?;
        if meta.versions.len() != meta.config.num_layers {
            return Err(BiwsError::Checkpoint("version list does not match layer count".into()));
        }
        let mut net = Supernet::new(&meta.config, meta.seed)?;
        let expected = net.to_container();
        if expected.arrays.len() != c.arrays.len() {
            return Err(BiwsError::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.arrays.len(),
                c.arrays.len()
            )));
        }
        for ((en, et), (name, t)) in expected.arrays.iter().zip(&c.arrays) {
            if en != name {
                return Err(BiwsError::Checkpoint(format!("expected array {en}, found {name}")));
            }
            check_shape(name.clone(), t, et.shape())?;
        }
        let mut it = c.arrays.iter().map(|(_, t)| t.clone());
        for (layer, version) in net.layers.iter_mut().zip(&meta.versions) {
            for p in layer.proj.iter_mut() {
                *p = it.next().expect("counted");
            }
            layer.w_o = it.next().expect("counted");
            layer.w_glu = it.next().expect("counted");
            layer.kernel = it.next().expect("counted");
            for t in layer.transforms.values_mut() {
                *t = it.next().expect("counted");
            }
            layer.version = *version;
        }
        for t in net.shared.values_mut() {
            *t = it.next().expect("counted");
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
