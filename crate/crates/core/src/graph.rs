//! Role-tagged network modules and their composition.
//!
//! A [`NetModule`] is an ordered layer stack with a role (category, task or
//! adapter). A [`TeacherNet`] pairs a category module with a task module. A
//! [`TransplantNet`] is the growing registry of category modules, task
//! modules and adapters keyed by `(category, task)`; grafting copies a
//! teacher's category module in bitwise and attaches a freshly initialized
//! adapter. Category and task modules inside a transplant net are always
//! frozen; trainers derive trainability from the frozen flag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{self, LayerParams, LayerSpec, TraceEntry};
use crate::tensor::{Element, Rng, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Category,
    Task,
    Adapter,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Category => write!(f, "category"),
            Role::Task => write!(f, "task"),
            Role::Adapter => write!(f, "adapter"),
        }
    }
}

/// Adapters may contain at most this many conv layers unless a caller raises
/// the bound explicitly.
pub const DEFAULT_MAX_ADAPTER_CONVS: usize = 3;

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Ordered layer stack with role tag, parameters and inferred shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetModule<E: Element> {
    id: String,
    role: Role,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams<E>>,
    input_shape: Shape,
    output_shape: Shape,
    frozen: bool,
}

impl<E: Element> NetModule<E> {
    /// Validates parameter shapes, threads shape inference through all layers
    /// and, for adapters, enforces the conv-layer budget.
    pub fn new(
        id: impl Into<String>,
        role: Role,
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams<E>>,
        input_shape: Shape,
    ) -> Result<Self> {
        Self::with_adapter_limit(id, role, layers, params, input_shape, DEFAULT_MAX_ADAPTER_CONVS)
    }

    pub fn with_adapter_limit(
        id: impl Into<String>,
        role: Role,
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams<E>>,
        input_shape: Shape,
        max_adapter_convs: usize,
    ) -> Result<Self> {
        let id = id.into();
        if !valid_id(&id) {
            return Err(Error::Config(format!(
                "module id `{id}` must be non-empty and use [A-Za-z0-9._-]"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Config(format!("module `{id}` has no layers")));
        }
        if layers.len() != params.len() {
            return Err(Error::Config(format!(
                "module `{id}`: {} layer specs but {} parameter sets",
                layers.len(),
                params.len()
            )));
        }
        if role == Role::Adapter {
            let convs = layers
                .iter()
                .filter(|s| matches!(s, LayerSpec::Conv { .. }))
                .count();
            let only_conv_relu = layers
                .iter()
                .all(|s| matches!(s, LayerSpec::Conv { .. } | LayerSpec::Relu));
            if !only_conv_relu || convs == 0 || convs > max_adapter_convs {
                return Err(Error::Config(format!(
                    "adapter `{id}` must be 1..={max_adapter_convs} conv layers with optional relu, got {:?}",
                    layers.iter().map(LayerSpec::name).collect::<Vec<_>>()
                )));
            }
        }
        let mut shape = input_shape.clone();
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            p.validate_for(spec)?;
            shape = spec.output_shape(&shape).map_err(|e| at_layer(e, i))?;
        }
        Ok(NetModule {
            id,
            role,
            layers,
            params,
            input_shape,
            output_shape: shape,
            frozen: false,
        })
    }

    /// He-initialized parameters for every layer, drawn from `rng` in layer
    /// order.
    pub fn with_random_params(
        id: impl Into<String>,
        role: Role,
        layers: Vec<LayerSpec>,
        input_shape: Shape,
        rng: &mut Rng,
    ) -> Result<Self> {
        let params = layers.iter().map(|s| init::he_params(s, rng)).collect();
        Self::new(id, role, layers, params, input_shape)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<E>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.output_shape
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub(crate) fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Forward through the whole module.
    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<TraceEntry<E>>)> {
        let mut cur = x.clone();
        let mut trace = Vec::with_capacity(self.layers.len());
        for (i, (spec, p)) in self.layers.iter().zip(&self.params).enumerate() {
            let (y, entry) = layers::forward(spec, p, &cur).map_err(|e| at_layer(e, i))?;
            trace.push(entry);
            cur = y;
        }
        Ok((cur, trace))
    }

    /// SHA-256 over all parameters in layer order, weights then bias,
    /// little-endian bytes.
    pub fn param_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in &self.params {
            if let Some(w) = &p.weights {
                hasher.update(w.to_le_bytes());
            }
            if let Some(b) = &p.bias {
                hasher.update(b.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn param_hash_hex(&self) -> String {
        hex(&self.param_hash())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

fn at_layer(e: Error, index: usize) -> Error {
    match e {
        Error::InadmissibleInput {
            layer,
            input,
            reason,
            ..
        } => Error::InadmissibleInput {
            index,
            layer,
            input,
            reason,
        },
        other => other,
    }
}

/// Parameter initialization rules.
pub mod init {
    use super::*;

    /// Weights ~ N(0, 2 / fan_in), bias 0.
    pub fn he_params<E: Element>(spec: &LayerSpec, rng: &mut Rng) -> LayerParams<E> {
        match spec.param_shapes() {
            None => LayerParams::none(),
            Some((w_shape, b_shape)) => {
                let fan_in = match *spec {
                    LayerSpec::Conv {
                        in_channels, kernel, ..
                    } => in_channels * kernel * kernel,
                    LayerSpec::Dense { inputs, .. } => inputs,
                    _ => unreachable!(),
                };
                let std = E::from_f64((2.0 / fan_in as f64).sqrt());
                let w = Tensor::randn(&w_shape, rng).scale(std);
                LayerParams::new(w, Tensor::zeros(&b_shape))
            }
        }
    }

    /// Identity-like kernels (center tap 1 on matching channels) plus small
    /// noise; the natural warm start when the category output space already
    /// resembles the task input space. Only defined for conv layers.
    pub fn near_identity_params<E: Element>(
        spec: &LayerSpec,
        noise: f64,
        rng: &mut Rng,
    ) -> LayerParams<E> {
        match *spec {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kernel,
                ..
            } => {
                let (w_shape, b_shape) = spec.param_shapes().expect("conv has params");
                let center = kernel / 2;
                let mut w = Tensor::randn(&w_shape, rng).scale(E::from_f64(noise));
                for oc in 0..out_channels {
                    if oc < in_channels {
                        let i = ((oc * in_channels + oc) * kernel + center) * kernel + center;
                        w.data_mut()[i] += E::ONE;
                    }
                }
                LayerParams::new(w, Tensor::zeros(&b_shape))
            }
            _ => LayerParams::none(),
        }
    }
}

/// Adapter architecture: `convs` conv layers (odd kernel, stride 1, padding
/// preserving the spatial extent), each followed by a ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterArch {
    pub convs: usize,
    pub hidden_channels: Option<usize>,
    pub kernel: usize,
}

impl Default for AdapterArch {
    fn default() -> Self {
        AdapterArch {
            convs: 1,
            hidden_channels: None,
            kernel: 3,
        }
    }
}

impl AdapterArch {
    pub fn with_depth(convs: usize) -> Self {
        AdapterArch {
            convs,
            ..AdapterArch::default()
        }
    }

    /// Layer stack mapping `in_channels` to `out_channels`.
    pub fn build_layers(&self, in_channels: usize, out_channels: usize) -> Result<Vec<LayerSpec>> {
        if self.convs == 0 {
            return Err(Error::Config("adapter needs at least one conv".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("adapter kernel must be odd".into()));
        }
        let hidden = self.hidden_channels.unwrap_or(in_channels.max(out_channels));
        let mut channels = Vec::with_capacity(self.convs + 1);
        channels.push(in_channels);
        for _ in 1..self.convs {
            channels.push(hidden);
        }
        channels.push(out_channels);
        let mut specs = Vec::with_capacity(self.convs * 2);
        for i in 0..self.convs {
            specs.push(LayerSpec::Conv {
                out_channels: channels[i + 1],
                in_channels: channels[i],
                kernel: self.kernel,
                stride: 1,
                padding: self.kernel / 2,
            });
            specs.push(LayerSpec::Relu);
        }
        Ok(specs)
    }
}

/// Initialization scheme for a freshly grafted adapter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum AdapterInit {
    /// He-style random init (default).
    He,
    /// Identity-like kernels with small noise.
    NearIdentity { noise: f64 },
}

impl Default for AdapterInit {
    fn default() -> Self {
        AdapterInit::He
    }
}

/// Pre-trained pair of a category module (lower layers) and a task module
/// (upper layers) whose junction shapes agree.
#[derive(Debug, Clone)]
pub struct TeacherNet<E: Element> {
    pub category: NetModule<E>,
    pub task: NetModule<E>,
}

impl<E: Element> TeacherNet<E> {
    pub fn new(category: NetModule<E>, task: NetModule<E>) -> Result<Self> {
        if category.role() != Role::Category || task.role() != Role::Task {
            return Err(Error::Config(
                "teacher needs a category module and a task module".into(),
            ));
        }
        if category.output_shape() != task.input_shape() {
            return Err(Error::Junction {
                from: category.id().to_string(),
                to: task.id().to_string(),
                reason: format!(
                    "category output {} != task input {}",
                    category.output_shape(),
                    task.input_shape()
                ),
            });
        }
        Ok(TeacherNet { category, task })
    }

    pub fn freeze(&mut self) {
        self.category.freeze();
        self.task.freeze();
    }

    /// Evaluable path `category -> task` with the junction after the category
    /// module.
    pub fn path(&self) -> ComposedPath<'_, E> {
        ComposedPath::from_modules(
            &[&self.category, &self.task],
            1,
            PathKey {
                category: self.category.id().to_string(),
                task: self.task.id().to_string(),
            },
        )
        .expect("teacher junction validated at construction")
    }
}

/// Registry of category modules, task modules and adapters keyed by
/// `(category, task)`.
#[derive(Debug, Clone, Default)]
pub struct TransplantNet<E: Element> {
    categories: BTreeMap<String, NetModule<E>>,
    tasks: BTreeMap<String, NetModule<E>>,
    adapters: BTreeMap<(String, String), NetModule<E>>,
}

impl<E: Element> TransplantNet<E> {
    pub fn new() -> Self {
        TransplantNet {
            categories: BTreeMap::new(),
            tasks: BTreeMap::new(),
            adapters: BTreeMap::new(),
        }
    }

    /// Installs a task module; it is frozen on insertion.
    pub fn add_task(&mut self, mut module: NetModule<E>) -> Result<()> {
        if module.role() != Role::Task {
            return Err(Error::Config(format!(
                "module `{}` has role {}, expected task",
                module.id(),
                module.role()
            )));
        }
        if self.tasks.contains_key(module.id()) {
            return Err(Error::DuplicateModule(module.id().to_string()));
        }
        module.freeze();
        self.tasks.insert(module.id().to_string(), module);
        Ok(())
    }

    pub fn categories(&self) -> impl Iterator<Item = &NetModule<E>> {
        self.categories.values()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &NetModule<E>> {
        self.tasks.values()
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&(String, String), &NetModule<E>)> {
        self.adapters.iter()
    }

    pub fn category(&self, id: &str) -> Result<&NetModule<E>> {
        self.categories
            .get(id)
            .ok_or_else(|| Error::MissingModule(id.to_string()))
    }

    pub fn task(&self, id: &str) -> Result<&NetModule<E>> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::MissingModule(id.to_string()))
    }

    pub fn adapter(&self, category: &str, task: &str) -> Result<&NetModule<E>> {
        self.adapters
            .get(&(category.to_string(), task.to_string()))
            .ok_or_else(|| Error::MissingModule(format!("adapter ({category}, {task})")))
    }

    /// Mutable access for adapter training; category and task modules stay
    /// behind immutable accessors.
    pub fn adapter_mut(&mut self, category: &str, task: &str) -> Result<&mut NetModule<E>> {
        self.adapters
            .get_mut(&(category.to_string(), task.to_string()))
            .ok_or_else(|| Error::MissingModule(format!("adapter ({category}, {task})")))
    }

    pub(crate) fn insert_module(&mut self, module: NetModule<E>) -> Result<()> {
        match module.role() {
            Role::Task => {
                if self.tasks.contains_key(module.id()) {
                    return Err(Error::DuplicateModule(module.id().to_string()));
                }
                self.tasks.insert(module.id().to_string(), module);
            }
            Role::Category => {
                if self.categories.contains_key(module.id()) {
                    return Err(Error::DuplicateModule(module.id().to_string()));
                }
                self.categories.insert(module.id().to_string(), module);
            }
            Role::Adapter => {
                return Err(Error::Config(
                    "adapters are inserted through graft or checkpoint load".into(),
                ))
            }
        }
        Ok(())
    }

    pub(crate) fn insert_adapter(
        &mut self,
        category: &str,
        task: &str,
        module: NetModule<E>,
    ) -> Result<()> {
        let key = (category.to_string(), task.to_string());
        if self.adapters.contains_key(&key) {
            return Err(Error::DuplicateModule(format!("adapter ({category}, {task})")));
        }
        self.adapters.insert(key, module);
        Ok(())
    }

    /// Transplants the teacher's category module (frozen, bitwise copy) and
    /// attaches a freshly initialized adapter keyed
    /// `(teacher category id, task_id)`. No existing module changes.
    pub fn graft(
        &mut self,
        teacher: &TeacherNet<E>,
        task_id: &str,
        arch: &AdapterArch,
        adapter_init: AdapterInit,
        rng: &mut Rng,
    ) -> Result<()> {
        let cat_id = teacher.category.id().to_string();
        if self.categories.contains_key(&cat_id) {
            return Err(Error::DuplicateModule(cat_id));
        }
        let task = self.task(task_id)?;
        let (cat_c, cat_h, cat_w) = teacher.category.output_shape().as_chw().map_err(|_| {
            Error::Junction {
                from: cat_id.clone(),
                to: task_id.to_string(),
                reason: "category output is not channels x height x width".into(),
            }
        })?;
        let (task_c, task_h, task_w) =
            task.input_shape().as_chw().map_err(|_| Error::Junction {
                from: cat_id.clone(),
                to: task_id.to_string(),
                reason: "task input is not channels x height x width".into(),
            })?;
        if (cat_h, cat_w) != (task_h, task_w) {
            return Err(Error::Junction {
                from: cat_id.clone(),
                to: task_id.to_string(),
                reason: format!(
                    "spatial extents irreconcilable by a conv adapter: {}x{} vs {}x{}",
                    cat_h, cat_w, task_h, task_w
                ),
            });
        }
        let specs = arch.build_layers(cat_c, task_c)?;
        let params = specs
            .iter()
            .map(|s| match adapter_init {
                AdapterInit::He => init::he_params(s, rng),
                AdapterInit::NearIdentity { noise } => init::near_identity_params(s, noise, rng),
            })
            .collect();
        let adapter = NetModule::new(
            format!("adapter.{cat_id}.{task_id}"),
            Role::Adapter,
            specs,
            params,
            teacher.category.output_shape().clone(),
        )?;
        if adapter.output_shape() != task.input_shape() {
            return Err(Error::Junction {
                from: adapter.id().to_string(),
                to: task_id.to_string(),
                reason: format!(
                    "adapter output {} != task input {}",
                    adapter.output_shape(),
                    task.input_shape()
                ),
            });
        }
        let mut category = teacher.category.clone();
        category.set_frozen(true);
        self.categories.insert(cat_id.clone(), category);
        self.insert_adapter(&cat_id, task_id, adapter)?;
        Ok(())
    }

    /// Evaluable path `category -> adapter -> task`. Pure: borrows parameters
    /// in place, never copies them.
    pub fn compose_path(&self, category: &str, task: &str) -> Result<ComposedPath<'_, E>> {
        let cat = self.category(category)?;
        let adapter = self.adapter(category, task)?;
        let t = self.task(task)?;
        if cat.output_shape() != adapter.input_shape() {
            return Err(Error::Junction {
                from: category.to_string(),
                to: adapter.id().to_string(),
                reason: format!(
                    "category output {} != adapter input {}",
                    cat.output_shape(),
                    adapter.input_shape()
                ),
            });
        }
        if adapter.output_shape() != t.input_shape() {
            return Err(Error::Junction {
                from: adapter.id().to_string(),
                to: task.to_string(),
                reason: format!(
                    "adapter output {} != task input {}",
                    adapter.output_shape(),
                    t.input_shape()
                ),
            });
        }
        ComposedPath::from_modules(
            &[cat, adapter, t],
            1,
            PathKey {
                category: category.to_string(),
                task: task.to_string(),
            },
        )
    }

    /// Hex hashes of every frozen module (categories and tasks), in
    /// deterministic id order.
    pub fn frozen_hashes(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for m in self.categories.values().chain(self.tasks.values()) {
            if m.frozen() {
                out.push((m.id().to_string(), m.param_hash_hex()));
            }
        }
        out
    }
}

/// Identifies which category/task pair a path came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathKey {
    pub category: String,
    pub task: String,
}

/// One layer of a composed path: borrowed spec and parameters plus resolved
/// shapes and flags.
#[derive(Debug)]
pub struct PathLayer<'a, E: Element> {
    pub spec: &'a LayerSpec,
    pub params: &'a LayerParams<E>,
    pub frozen: bool,
    pub trainable: bool,
    pub in_shape: Shape,
    pub out_shape: Shape,
}

/// Which parameter gradients a backward walk collects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    TrainableOnly,
    All,
}

/// Forward trace over a suffix of a path, starting at `first_layer`.
#[derive(Debug)]
pub struct PathTrace<E: Element> {
    pub first_layer: usize,
    pub entries: Vec<TraceEntry<E>>,
}

/// Gradient of a scalar probe with respect to a layer input, plus parameter
/// gradients aligned to the full path layer list.
#[derive(Debug)]
pub struct BackwardOutcome<E: Element> {
    pub input_grad: Tensor<E>,
    pub param_grads: Vec<Option<LayerParams<E>>>,
}

/// Concatenated, shape-threaded view over the layers of several modules with
/// a junction index marking where the category module ends.
#[derive(Debug)]
pub struct ComposedPath<'a, E: Element> {
    pub layers: Vec<PathLayer<'a, E>>,
    /// Index of the first layer above the junction.
    pub junction: usize,
    pub key: PathKey,
}

impl<'a, E: Element> ComposedPath<'a, E> {
    /// `junction_module`: index into `modules` of the first module above the
    /// junction.
    pub fn from_modules(
        modules: &[&'a NetModule<E>],
        junction_module: usize,
        key: PathKey,
    ) -> Result<Self> {
        assert!(junction_module <= modules.len());
        let mut layers = Vec::new();
        let mut junction = 0;
        let mut shape = modules
            .first()
            .expect("path needs at least one module")
            .input_shape()
            .clone();
        for (mi, m) in modules.iter().enumerate() {
            if mi == junction_module {
                junction = layers.len();
            }
            if m.input_shape() != &shape {
                return Err(Error::Junction {
                    from: if mi == 0 { "input".into() } else { modules[mi - 1].id().into() },
                    to: m.id().to_string(),
                    reason: format!("expected {}, got {}", m.input_shape(), shape),
                });
            }
            for (spec, params) in m.layers().iter().zip(m.params()) {
                let in_shape = shape.clone();
                shape = spec
                    .output_shape(&in_shape)
                    .map_err(|e| at_layer(e, layers.len()))?;
                layers.push(PathLayer {
                    spec,
                    params,
                    frozen: m.frozen(),
                    trainable: !m.frozen(),
                    in_shape,
                    out_shape: shape.clone(),
                });
            }
        }
        if junction_module == modules.len() {
            junction = layers.len();
        }
        Ok(ComposedPath {
            layers,
            junction,
            key,
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.layers[0].in_shape
    }

    pub fn output_shape(&self) -> &Shape {
        &self.layers.last().expect("non-empty path").out_shape
    }

    pub fn junction_shape(&self) -> &Shape {
        if self.junction == 0 {
            self.input_shape()
        } else {
            &self.layers[self.junction - 1].out_shape
        }
    }

    fn forward_from(&self, first_layer: usize, x: &Tensor<E>) -> Result<(Tensor<E>, PathTrace<E>)> {
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(self.layers.len() - first_layer);
        for (i, layer) in self.layers.iter().enumerate().skip(first_layer) {
            let (y, entry) =
                layers::forward(layer.spec, layer.params, &cur).map_err(|e| at_layer(e, i))?;
            entries.push(entry);
            cur = y;
        }
        Ok((
            cur,
            PathTrace {
                first_layer,
                entries,
            },
        ))
    }

    /// Forward through the whole path.
    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, PathTrace<E>)> {
        self.forward_from(0, x)
    }

    /// Forward through the layers above the junction, starting from junction
    /// features.
    pub fn forward_upper(&self, x_junction: &Tensor<E>) -> Result<(Tensor<E>, PathTrace<E>)> {
        self.forward_from(self.junction, x_junction)
    }

    /// Exact backward walk from the path output down to (and including) the
    /// layer at `stop`, using the given trace. Returns the gradient flowing
    /// into layer `stop` and parameter gradients aligned to the full layer
    /// list.
    pub fn backward(
        &self,
        trace: &PathTrace<E>,
        g_output: &Tensor<E>,
        scope: GradScope,
        stop: usize,
    ) -> Result<BackwardOutcome<E>> {
        if trace.first_layer + trace.entries.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "trace covers layers {}..{}, path has {}",
                trace.first_layer,
                trace.first_layer + trace.entries.len(),
                self.layers.len()
            )));
        }
        if stop < trace.first_layer {
            return Err(Error::Config(format!(
                "backward to layer {stop} but trace starts at {}",
                trace.first_layer
            )));
        }
        let mut grads: Vec<Option<LayerParams<E>>> =
            (0..self.layers.len()).map(|_| None).collect();
        let mut g = g_output.clone();
        for i in (stop..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let entry = &trace.entries[i - trace.first_layer];
            let want = match scope {
                GradScope::None => false,
                GradScope::TrainableOnly => layer.trainable && layer.spec.has_params(),
                GradScope::All => layer.spec.has_params(),
            };
            let (g_in, pg) = layers::backward(layer.spec, layer.params, entry, &g)
                .map_err(|e| at_layer(e, i))?;
            if want {
                grads[i] = pg;
            }
            g = g_in;
        }
        Ok(BackwardOutcome {
            input_grad: g,
            param_grads: grads,
        })
    }

    /// Indices of trainable layers carrying parameters.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.trainable && l.spec.has_params())
            .map(|(i, _)| i)
            .collect()
    }
}
