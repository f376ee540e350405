//! The differentiation engine behind gradient-level distillation.
//!
//! A pseudo-gradient is built by running the feature-agnostic backward rules
//! from a seed at the task output down to the junction. Because every stage
//! of that pass is linear in the flowing gradient, the whole pass can be
//! reified as a [`BackwardGraph`]: a feed-forward computation whose inputs
//! are the seed and the live adapter parameters and whose output is the
//! pseudo-gradient. Minimizing the distillation loss then needs the
//! derivative of that computation with respect to adapter parameters, i.e.
//! ordinary backpropagation through a backward pass.
//!
//! Per-stage ingredients (all in [`crate::layers`]):
//! - apply: the pseudo-backward rule itself,
//! - adjoint: the layer's forward linear map without bias,
//! - weight grad: the bilinear cross term, conv/dense stages only. Bias never
//!   enters an input-gradient map, so its distillation gradient is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ComposedPath, GradScope, PathTrace};
use crate::layers::{self, LayerParams, LayerSpec, PseudoRules};
use crate::parallel::par_map;
use crate::tensor::{Element, Rng, Shape, Tensor};

/// Where a gradient seed came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedProvenance {
    RandomNormal { stream_seed: u64 },
    OneHot { index: usize },
    Custom,
}

/// A tensor `G = dJ/dy` standing in for an arbitrary scalar probe `J` of the
/// task output. Teacher and student evaluations of one loss term must consume
/// the same seed instance; the id enforces that.
#[derive(Debug, Clone)]
pub struct GradSeed<E: Element> {
    pub value: Tensor<E>,
    pub id: u64,
    pub provenance: SeedProvenance,
}

/// Fresh batch of standard-normal seeds; ids continue from `next_id`.
pub fn random_seeds<E: Element>(
    shape: &Shape,
    count: usize,
    rng: &mut Rng,
    next_id: &mut u64,
) -> Vec<GradSeed<E>> {
    (0..count)
        .map(|_| {
            let id = *next_id;
            *next_id += 1;
            GradSeed {
                value: Tensor::randn(shape, rng),
                id,
                provenance: SeedProvenance::RandomNormal {
                    stream_seed: rng.seed(),
                },
            }
        })
        .collect()
}

/// One-hot seed batch cycling through output indices; ablation alternative to
/// random probing.
pub fn one_hot_seeds<E: Element>(
    shape: &Shape,
    count: usize,
    next_id: &mut u64,
) -> Vec<GradSeed<E>> {
    let n = shape.count();
    (0..count)
        .map(|k| {
            let id = *next_id;
            *next_id += 1;
            let mut t = Tensor::zeros(shape);
            t.data_mut()[k % n] = E::ONE;
            GradSeed {
                value: t,
                id,
                provenance: SeedProvenance::OneHot { index: k % n },
            }
        })
        .collect()
}

/// Exact `D = dJ/dx` at the junction via the true chain rule, using a forward
/// trace of the same path. Does not descend into the category module.
pub fn true_input_gradient<E: Element>(
    path: &ComposedPath<'_, E>,
    trace: &PathTrace<E>,
    seed: &GradSeed<E>,
) -> Result<Tensor<E>> {
    if seed.value.shape() != path.output_shape() {
        return Err(Error::ShapeMismatch {
            op: "true_input_gradient seed",
            expected: path.output_shape().to_string(),
            got: seed.value.shape().to_string(),
        });
    }
    let outcome = path.backward(trace, &seed.value, GradScope::None, path.junction)?;
    Ok(outcome.input_grad)
}

/// Pseudo-gradient `D'` at the junction: composes the per-layer pseudo rules
/// over the layers above the junction. A deterministic function of the path
/// parameters and the seed only; no forward pass, no image.
pub fn pseudo_gradient<E: Element>(
    path: &ComposedPath<'_, E>,
    seed: &GradSeed<E>,
    rules: &PseudoRules,
) -> Result<Tensor<E>> {
    if seed.value.shape() != path.output_shape() {
        return Err(Error::ShapeMismatch {
            op: "pseudo_gradient seed",
            expected: path.output_shape().to_string(),
            got: seed.value.shape().to_string(),
        });
    }
    let mut g = seed.value.clone();
    for layer in path.layers[path.junction..].iter().rev() {
        g = layers::pseudo_backward(layer.spec, layer.params, &layer.in_shape, &g, rules)?;
    }
    Ok(g)
}

/// One reified stage of a pseudo-backward pass.
#[derive(Debug, Clone)]
struct Stage {
    spec: LayerSpec,
    /// The layer's forward input shape (the stage's output shape).
    in_shape: Shape,
    /// The layer's forward output shape (the stage's input shape).
    out_shape: Shape,
    /// Index of the layer in the composed path; parameters are resolved
    /// through this index at evaluation time, so the binding stays live.
    path_index: usize,
    trainable: bool,
}

/// Reified, differentiable pseudo-backward pass over the layers above a
/// path's junction. Stages mirror those layers in exact reverse order; the
/// input port takes a seed, the output port yields the pseudo-gradient at the
/// junction.
#[derive(Debug, Clone)]
pub struct BackwardGraph {
    stages: Vec<Stage>,
    seed_shape: Shape,
    junction_shape: Shape,
    path_layer_count: usize,
    rules: PseudoRules,
}

/// Cached evaluation: the gradient tensor flowing into every stage, plus the
/// final pseudo-gradient. Feeds the second-order pass.
#[derive(Debug)]
pub struct GraphEval<E: Element> {
    stage_inputs: Vec<Tensor<E>>,
    pub output: Tensor<E>,
    seed_id: u64,
}

/// Reifies the pseudo-backward pass of `path` into a graph.
pub fn build_graph<E: Element>(path: &ComposedPath<'_, E>, rules: &PseudoRules) -> Result<BackwardGraph> {
    if path.junction >= path.layers.len() {
        return Err(Error::Config(
            "path has no layers above the junction to reify".into(),
        ));
    }
    let stages = path.layers[path.junction..]
        .iter()
        .enumerate()
        .rev()
        .map(|(offset, layer)| Stage {
            spec: layer.spec.clone(),
            in_shape: layer.in_shape.clone(),
            out_shape: layer.out_shape.clone(),
            path_index: path.junction + offset,
            trainable: layer.trainable && layer.spec.has_params(),
        })
        .collect();
    Ok(BackwardGraph {
        stages,
        seed_shape: path.output_shape().clone(),
        junction_shape: path.junction_shape().clone(),
        path_layer_count: path.layers.len(),
        rules: *rules,
    })
}

impl BackwardGraph {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn seed_shape(&self) -> &Shape {
        &self.seed_shape
    }

    pub fn junction_shape(&self) -> &Shape {
        &self.junction_shape
    }

    /// Layer kinds in stage order (reverse path order); diagnostic.
    pub fn stage_kinds(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.spec.name()).collect()
    }

    fn check_path<E: Element>(&self, path: &ComposedPath<'_, E>) -> Result<()> {
        if path.layers.len() != self.path_layer_count {
            return Err(Error::Config(format!(
                "graph built over {} path layers, given {}",
                self.path_layer_count,
                path.layers.len()
            )));
        }
        for stage in &self.stages {
            let layer = &path.layers[stage.path_index];
            if layer.spec != &stage.spec {
                return Err(Error::Config(format!(
                    "path layer {} changed kind since the graph was built",
                    stage.path_index
                )));
            }
        }
        Ok(())
    }

    /// Runs the graph: identical, stage for stage, to composing
    /// `pseudo_backward` over the path. Parameters are read live from `path`.
    pub fn evaluate<E: Element>(
        &self,
        path: &ComposedPath<'_, E>,
        seed: &GradSeed<E>,
    ) -> Result<Tensor<E>> {
        Ok(self.evaluate_cached(path, seed)?.output)
    }

    /// Like [`evaluate`](Self::evaluate) but keeps every stage input for the
    /// second-order pass.
    pub fn evaluate_cached<E: Element>(
        &self,
        path: &ComposedPath<'_, E>,
        seed: &GradSeed<E>,
    ) -> Result<GraphEval<E>> {
        self.check_path(path)?;
        if seed.value.shape() != &self.seed_shape {
            return Err(Error::ShapeMismatch {
                op: "graph seed",
                expected: self.seed_shape.to_string(),
                got: seed.value.shape().to_string(),
            });
        }
        let mut stage_inputs = Vec::with_capacity(self.stages.len());
        let mut g = seed.value.clone();
        for stage in &self.stages {
            if g.shape() != &stage.out_shape {
                return Err(Error::ShapeMismatch {
                    op: "graph stage input",
                    expected: stage.out_shape.to_string(),
                    got: g.shape().to_string(),
                });
            }
            let params = path.layers[stage.path_index].params;
            let next =
                layers::pseudo_backward(&stage.spec, params, &stage.in_shape, &g, &self.rules)?;
            stage_inputs.push(g);
            g = next;
        }
        Ok(GraphEval {
            stage_inputs,
            output: g,
            seed_id: seed.id,
        })
    }

    /// Backpropagates `upstream` (the loss gradient at the graph output)
    /// through the reified stages, producing parameter gradients for the
    /// trainable stages, aligned to the path layer list.
    fn backprop_params<E: Element>(
        &self,
        path: &ComposedPath<'_, E>,
        eval: &GraphEval<E>,
        upstream: &Tensor<E>,
    ) -> Result<Vec<Option<LayerParams<E>>>> {
        let mut grads: Vec<Option<LayerParams<E>>> =
            (0..self.path_layer_count).map(|_| None).collect();
        let mut u = upstream.clone();
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let params = path.layers[stage.path_index].params;
            if stage.trainable {
                let gw = layers::pseudo_weight_grad(
                    &stage.spec,
                    &stage.in_shape,
                    &u,
                    &eval.stage_inputs[i],
                )?
                .expect("trainable stages carry weights");
                let (_, b_shape) = stage.spec.param_shapes().expect("trainable stages");
                grads[stage.path_index] = Some(LayerParams::new(gw, Tensor::zeros(&b_shape)));
            }
            u = layers::pseudo_adjoint(&stage.spec, params, &stage.in_shape, &u, &self.rules)?;
        }
        Ok(grads)
    }
}

/// Scaling-scalar policy for the distillation residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// Closed-form least squares over the seed batch, shared across seeds and
    /// treated as a constant within the step (default).
    Ls,
    /// Per-seed least squares; ablation variant.
    LsPerSeed,
    /// Fixed at 1.
    Fixed1,
    /// A scalar parameter updated by the optimizer alongside the adapter.
    Learnable,
}

impl Default for AlphaMode {
    fn default() -> Self {
        AlphaMode::Ls
    }
}

/// Teacher pseudo-gradients for one seed batch, tagged with the seed ids they
/// were computed from.
#[derive(Debug, Clone)]
pub struct TeacherPseudoGrads<E: Element> {
    pub seed_ids: Vec<u64>,
    pub values: Vec<Tensor<E>>,
}

/// Computes and caches the teacher's pseudo-gradients for a seed batch. The
/// teacher is frozen, so these stay valid for the whole step.
pub fn teacher_pseudo_grads<E: Element>(
    teacher_path: &ComposedPath<'_, E>,
    seeds: &[GradSeed<E>],
    rules: &PseudoRules,
) -> Result<TeacherPseudoGrads<E>> {
    let values = par_map(seeds, |s| pseudo_gradient(teacher_path, s, rules));
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(TeacherPseudoGrads {
        seed_ids: seeds.iter().map(|s| s.id).collect(),
        values,
    })
}

/// The pseudo-backward pass of a fixed path is one linear map of the seed;
/// this caches its basis images so later seed evaluations reduce to small
/// linear combinations. Only valid while the path's parameters do not change,
/// i.e. for frozen teacher paths.
#[derive(Debug, Clone)]
pub struct LinearPseudoMap<E: Element> {
    basis: Vec<Tensor<E>>,
    seed_shape: Shape,
}

impl<E: Element> LinearPseudoMap<E> {
    pub fn of_path(path: &ComposedPath<'_, E>, rules: &PseudoRules) -> Result<Self> {
        let seed_shape = path.output_shape().clone();
        let indices: Vec<usize> = (0..seed_shape.count()).collect();
        let basis = par_map(&indices, |&j| {
            let mut value = Tensor::zeros(&seed_shape);
            value.data_mut()[j] = E::ONE;
            pseudo_gradient(
                path,
                &GradSeed {
                    value,
                    id: j as u64,
                    provenance: SeedProvenance::OneHot { index: j },
                },
                rules,
            )
        });
        Ok(LinearPseudoMap {
            basis: basis.into_iter().collect::<Result<_>>()?,
            seed_shape,
        })
    }

    pub fn apply(&self, seed: &Tensor<E>) -> Result<Tensor<E>> {
        if seed.shape() != &self.seed_shape {
            return Err(Error::ShapeMismatch {
                op: "linear pseudo map",
                expected: self.seed_shape.to_string(),
                got: seed.shape().to_string(),
            });
        }
        let mut out = Tensor::zeros(self.basis[0].shape());
        for (j, b) in self.basis.iter().enumerate() {
            out.add_scaled_inplace(seed.data()[j], b)?;
        }
        Ok(out)
    }

    /// Teacher pseudo-gradients for a seed batch via the cached basis.
    pub fn grads_for(&self, seeds: &[GradSeed<E>]) -> Result<TeacherPseudoGrads<E>> {
        Ok(TeacherPseudoGrads {
            seed_ids: seeds.iter().map(|s| s.id).collect(),
            values: seeds
                .iter()
                .map(|s| self.apply(&s.value))
                .collect::<Result<_>>()?,
        })
    }
}

/// Result of one distillation loss evaluation.
#[derive(Debug)]
pub struct DistillOutcome<E: Element> {
    /// `lambda * mean_k ||alpha_k * D'_S_k - D'_T_k||^2`.
    pub loss: f64,
    /// Resolved alpha (mean over seeds in per-seed mode).
    pub alpha: f64,
    /// Parameter gradients aligned to the path layer list; `Some` exactly on
    /// trainable layers.
    pub grads: Vec<Option<LayerParams<E>>>,
    /// d loss / d alpha, only under [`AlphaMode::Learnable`].
    pub alpha_grad: Option<f64>,
}

/// Least-squares alpha is clamped to a positive floor. A negative scale would
/// let the student match a reflected gradient field, which the forward-pass
/// ReLUs then destroy; alpha is a scale, not a reflection. The floor's size
/// is uncritical under Adam, which renormalizes the gradient magnitude.
const ALPHA_FLOOR: f64 = 0.1;

fn resolve_alpha(
    mode: AlphaMode,
    learned: Option<f64>,
    dots: &[f64],
    norms: &[f64],
) -> Result<Vec<f64>> {
    let k = dots.len();
    let ls = |num: f64, den: f64| {
        if den > 1e-300 {
            (num / den).max(ALPHA_FLOOR)
        } else {
            1.0
        }
    };
    match mode {
        AlphaMode::Fixed1 => Ok(vec![1.0; k]),
        AlphaMode::Learnable => {
            let a = learned.ok_or_else(|| {
                Error::Config("learnable alpha mode needs the current alpha value".into())
            })?;
            Ok(vec![a; k])
        }
        AlphaMode::Ls => {
            let num: f64 = dots.iter().sum();
            let den: f64 = norms.iter().sum();
            Ok(vec![ls(num, den); k])
        }
        AlphaMode::LsPerSeed => Ok(dots.iter().zip(norms).map(|(&d, &n)| ls(d, n)).collect()),
    }
}

/// Evaluates the distillation loss over a seed batch and differentiates it
/// with respect to the adapter parameters by backpropagating through the
/// reified backward graph (the second-order pass).
///
/// The teacher pseudo-gradients must come from the same seed instances; ids
/// are checked. Alpha is resolved per `alpha_mode` and treated as a constant
/// for the gradient except in learnable mode, where its own derivative is
/// returned.
pub fn distill_loss_and_grad<E: Element>(
    graph: &BackwardGraph,
    path: &ComposedPath<'_, E>,
    teacher: &TeacherPseudoGrads<E>,
    seeds: &[GradSeed<E>],
    alpha_mode: AlphaMode,
    alpha_learned: Option<f64>,
    lambda: f64,
) -> Result<DistillOutcome<E>> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    if seeds.is_empty() {
        return Err(Error::SeedMismatch("empty seed batch".into()));
    }
    if teacher.values.len() != seeds.len() {
        return Err(Error::SeedMismatch(format!(
            "{} teacher pseudo-gradients for {} seeds",
            teacher.values.len(),
            seeds.len()
        )));
    }
    for (s, id) in seeds.iter().zip(&teacher.seed_ids) {
        if s.id != *id {
            return Err(Error::SeedMismatch(format!(
                "teacher pseudo-gradient computed from seed {id}, student given seed {}",
                s.id
            )));
        }
    }
    let k = seeds.len();
    let zero_grads = || -> Vec<Option<LayerParams<E>>> {
        path.layers
            .iter()
            .map(|l| {
                (l.trainable && l.spec.has_params()).then(|| LayerParams::zeros_for(l.spec))
            })
            .collect()
    };
    if lambda == 0.0 {
        return Ok(DistillOutcome {
            loss: 0.0,
            alpha: match alpha_mode {
                AlphaMode::Learnable => alpha_learned.unwrap_or(1.0),
                _ => 1.0,
            },
            grads: zero_grads(),
            alpha_grad: matches!(alpha_mode, AlphaMode::Learnable).then_some(0.0),
        });
    }

    // The reified graph is linear in its seed. When the seed space is smaller
    // than the batch, evaluate the graph on the one-hot basis once and
    // synthesize per-seed values; equivalent up to floating-point rounding
    // and much cheaper for low-dimensional output heads.
    let out_dim = graph.seed_shape.count();
    let use_basis = out_dim < k;
    let basis_evals: Vec<GraphEval<E>> = if use_basis {
        let indices: Vec<usize> = (0..out_dim).collect();
        par_map(&indices, |&j| {
            let mut value = Tensor::zeros(&graph.seed_shape);
            value.data_mut()[j] = E::ONE;
            graph.evaluate_cached(
                path,
                &GradSeed {
                    value,
                    id: j as u64,
                    provenance: SeedProvenance::OneHot { index: j },
                },
            )
        })
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let per_seed_evals: Vec<GraphEval<E>> = if use_basis {
        Vec::new()
    } else {
        par_map(seeds, |s| graph.evaluate_cached(path, s))
            .into_iter()
            .collect::<Result<_>>()?
    };
    let student: Vec<Tensor<E>> = if use_basis {
        seeds
            .iter()
            .map(|s| {
                let mut out = Tensor::zeros(&graph.junction_shape);
                for (j, b) in basis_evals.iter().enumerate() {
                    out.add_scaled_inplace(s.value.data()[j], &b.output)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?
    } else {
        per_seed_evals
            .iter()
            .zip(seeds)
            .map(|(e, s)| {
                debug_assert_eq!(e.seed_id, s.id);
                e.output.clone()
            })
            .collect()
    };
    for (s, t) in student.iter().zip(&teacher.values) {
        if t.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "distill junction",
                expected: s.shape().to_string(),
                got: t.shape().to_string(),
            });
        }
    }

    let dots: Vec<f64> = student
        .iter()
        .zip(&teacher.values)
        .map(|(s, t)| s.dot_f64(t))
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = student.iter().map(Tensor::norm_sq_f64).collect();
    let alphas = resolve_alpha(alpha_mode, alpha_learned, &dots, &norms)?;

    let mut loss = 0.0;
    let mut residuals = Vec::with_capacity(k);
    for ((s, t), &a) in student.iter().zip(&teacher.values).zip(&alphas) {
        let r = s.scale(E::from_f64(a)).sub(t)?;
        loss += r.norm_sq_f64();
        residuals.push(r);
    }
    loss *= lambda / k as f64;

    // d loss / d D'_S_k = (2 lambda alpha_k / K) * r_k, alpha held constant.
    let mut grads = zero_grads();
    if use_basis {
        // By bilinearity, backpropagating upstream U_j = sum_k G_k[j] * u_k
        // through the basis-j stage cache accumulates exactly
        // sum_k <u_k, d D'_S(G_k) / d theta>.
        let indices: Vec<usize> = (0..out_dim).collect();
        let per_basis = par_map(&indices, |&j| -> Result<_> {
            let mut upstream = Tensor::zeros(&graph.junction_shape);
            for (i, r) in residuals.iter().enumerate() {
                let c = 2.0 * lambda * alphas[i] / k as f64;
                upstream
                    .add_scaled_inplace(E::from_f64(c) * seeds[i].value.data()[j], r)?;
            }
            graph.backprop_params(path, &basis_evals[j], &upstream)
        });
        for basis_grads in per_basis {
            for (slot, g) in grads.iter_mut().zip(basis_grads?) {
                if let (Some(acc), Some(g)) = (slot.as_mut(), g) {
                    acc.add_scaled_inplace(E::ONE, &g)?;
                }
            }
        }
    } else {
        let indexed: Vec<usize> = (0..k).collect();
        let per_seed = par_map(&indexed, |&i| {
            let scale = E::from_f64(2.0 * lambda * alphas[i] / k as f64);
            let upstream = residuals[i].scale(scale);
            graph.backprop_params(path, &per_seed_evals[i], &upstream)
        });
        for seed_grads in per_seed {
            for (slot, g) in grads.iter_mut().zip(seed_grads?) {
                if let (Some(acc), Some(g)) = (slot.as_mut(), g) {
                    acc.add_scaled_inplace(E::ONE, &g)?;
                }
            }
        }
    }

    let alpha_grad = matches!(alpha_mode, AlphaMode::Learnable).then(|| {
        residuals
            .iter()
            .zip(&student)
            .map(|(r, s)| 2.0 * lambda / k as f64 * r.dot_f64(s).expect("same shape"))
            .sum()
    });

    let alpha = alphas.iter().sum::<f64>() / k as f64;
    Ok(DistillOutcome {
        loss,
        alpha,
        grads,
        alpha_grad,
    })
}
