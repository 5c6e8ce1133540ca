//! Two-head MLP: a shared backbone feeding a utility head and an adversarial
//! head that tries to recover the sensitive attribute from the shared
//! representation.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamVector, Tape, Tensor, Var};
use crate::seed::{self, Rng};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("input has {got} features, model expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("checkpoint does not match its spec: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Widths of the three sub-networks. Each is `in -> hidden -> out` with the
/// activation and dropout between the two linear layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub backbone_hidden: usize,
    pub representation: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub seed: u64,
}

impl MlpSpec {
    /// `d -> 100 -> 64` backbone, `64 -> 32 -> 2` heads, ReLU, dropout 0.25.
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            backbone_hidden: 100,
            representation: 64,
            head_hidden: 32,
            classes: 2,
            activation: Activation::Relu,
            dropout: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let widths = [
            self.input_dim,
            self.backbone_hidden,
            self.representation,
            self.head_hidden,
            self.classes,
        ];
        if widths.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "layer widths must be positive: {widths:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidSpec(format!(
                "dropout ratio {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    fn subnet_count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    pub fn backbone_params(&self) -> usize {
        Self::subnet_count(self.input_dim, self.backbone_hidden, self.representation)
    }

    pub fn head_params(&self) -> usize {
        Self::subnet_count(self.representation, self.head_hidden, self.classes)
    }
}

/// Forward-pass mode. Training mode applies inverted dropout drawn from the
/// given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }
}

/// Parameters of the backbone (θ_s), utility head (θ_t) and adversarial
/// head (θ_a).
#[derive(Clone, Debug, PartialEq)]
pub struct FairModel {
    pub spec: MlpSpec,
    pub backbone: ParamVector,
    pub utility: ParamVector,
    pub adversary: ParamVector,
}

/// Tape handles of every model parameter segment.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: Vec<Var>,
    pub utility: Vec<Var>,
    pub adversary: Vec<Var>,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .chain(&self.utility)
            .chain(&self.adversary)
            .copied()
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub utility: Var,
    pub adversary: Var,
    pub representation: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub utility: Tensor,
    pub adversary: Tensor,
    pub representation: Tensor,
}

fn init_subnet(prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut Rng) -> ParamVector {
    let mut weight = |fan_in: usize, fan_out: usize| {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Tensor::from_parts(vec![fan_in, fan_out], data)
    };
    let w1 = weight(input, hidden);
    let w2 = weight(hidden, output);
    ParamVector::new(vec![
        (format!("{prefix}.w1"), w1),
        (format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
        (format!("{prefix}.w2"), w2),
        (format!("{prefix}.b2"), Tensor::zeros(&[1, output])),
    ])
    .expect("segment names are unique")
}

/// `linear -> activation -> dropout -> linear` on a `[n, in]` input.
pub fn subnet_on_tape(
    tape: &mut Tape,
    params: &[Var],
    x: Var,
    activation: Activation,
    dropout: f64,
    mode: Mode<'_>,
) -> Result<Var, AutodiffError> {
    let h = tape.matmul(x, params[0])?;
    let h = tape.add_row(h, params[1])?;
    let mut h = match activation {
        Activation::Relu => tape.relu(h),
        Activation::Tanh => tape.tanh(h),
    };
    if let Mode::Train(rng) = mode {
        if dropout > 0.0 {
            let keep = 1.0 / (1.0 - dropout);
            let shape = tape.shape(h).to_vec();
            let n: usize = shape.iter().product();
            let mask = (0..n)
                .map(|_| if rng.random::<f64>() < dropout { 0.0 } else { keep })
                .collect();
            let m = tape.constant(Tensor::from_parts(shape, mask));
            h = tape.mul(h, m)?;
        }
    }
    let o = tape.matmul(h, params[2])?;
    tape.add_row(o, params[3])
}

/// Identity on the forward pass; multiplies the gradient flowing back
/// through it by `-strength`.
pub fn reverse_gradient(tape: &mut Tape, representation: Var, strength: f64) -> Var {
    tape.grad_reverse(representation, strength)
}

impl FairModel {
    pub fn init(spec: MlpSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = seed::rng(spec.seed, "init");
        let backbone = init_subnet(
            "backbone",
            spec.input_dim,
            spec.backbone_hidden,
            spec.representation,
            &mut rng,
        );
        let utility = init_subnet("utility", spec.representation, spec.head_hidden, spec.classes, &mut rng);
        let adversary = init_subnet(
            "adversary",
            spec.representation,
            spec.head_hidden,
            spec.classes,
            &mut rng,
        );
        Ok(Self {
            spec,
            backbone,
            utility,
            adversary,
        })
    }

    pub fn param_count(&self) -> usize {
        self.backbone.len() + self.utility.len() + self.adversary.len()
    }

    pub fn leaves(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            backbone: self.backbone.leaves(tape),
            utility: self.utility.leaves(tape),
            adversary: self.adversary.leaves(tape),
        }
    }

    /// θ_s ∪ θ_t as one vector, backbone segments first.
    pub fn classifier_params(&self) -> ParamVector {
        ParamVector::concat(&[&self.backbone, &self.utility]).expect("prefixes keep names unique")
    }

    /// Replaces θ_s and θ_t from a vector laid out like
    /// [`classifier_params`](Self::classifier_params).
    pub fn set_classifier_params(&mut self, params: &[f64]) {
        let nb = self.backbone.len();
        assert_eq!(params.len(), nb + self.utility.len(), "classifier parameter length");
        self.backbone.as_mut_slice().copy_from_slice(&params[..nb]);
        self.utility.as_mut_slice().copy_from_slice(&params[nb..]);
    }

    /// All parameters flattened as backbone, utility, adversary.
    pub fn flat_params(&self) -> Vec<f64> {
        [&self.backbone, &self.utility, &self.adversary]
            .iter()
            .flat_map(|p| p.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "parameter length");
        let mut rest = params;
        for part in [&mut self.backbone, &mut self.utility, &mut self.adversary] {
            let (head, tail) = rest.split_at(part.len());
            part.as_mut_slice().copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(NnError::WidthMismatch {
                expected: self.spec.input_dim,
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    pub fn backbone_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mode: Mode<'_>,
    ) -> Result<Var, AutodiffError> {
        subnet_on_tape(tape, vars, x, self.spec.activation, self.spec.dropout, mode)
    }

    /// Either head: `vars` selects the utility or the adversary parameters.
    pub fn head_on_tape(&self, tape: &mut Tape, vars: &[Var], rep: Var, mode: Mode<'_>) -> Result<Var, AutodiffError> {
        subnet_on_tape(tape, vars, rep, self.spec.activation, self.spec.dropout, mode)
    }

    /// Full forward pass. The adversary sees the representation through a
    /// gradient-reversal node when `reversal` is set.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x: Var,
        mut mode: Mode<'_>,
        reversal: Option<f64>,
    ) -> Result<Outputs, AutodiffError> {
        let representation = self.backbone_on_tape(tape, &vars.backbone, x, mode.reborrow())?;
        let utility = self.head_on_tape(tape, &vars.utility, representation, mode.reborrow())?;
        let adv_in = match reversal {
            Some(strength) => reverse_gradient(tape, representation, strength),
            None => representation,
        };
        let adversary = self.head_on_tape(tape, &vars.adversary, adv_in, mode)?;
        Ok(Outputs {
            utility,
            adversary,
            representation,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<ForwardOutput, NnError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &vars, xv, mode, None)?;
        Ok(ForwardOutput {
            utility: tape.value(out.utility).clone(),
            adversary: tape.value(out.adversary).clone(),
            representation: tape.value(out.representation).clone(),
        })
    }

    /// Eval-mode utility logits.
    pub fn utility_logits(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let backbone = self.backbone.leaves(&mut tape);
        let utility = self.utility.leaves(&mut tape);
        let xv = tape.constant(x.clone());
        let rep = self.backbone_on_tape(&mut tape, &backbone, xv, Mode::Eval)?;
        let out = self.head_on_tape(&mut tape, &utility, rep, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Eval-mode class predictions (argmax of the utility logits; ties go to
    /// the lower class).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<u8>, NnError> {
        let logits = self.utility_logits(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let segments = [&self.backbone, &self.utility, &self.adversary]
            .into_iter()
            .flat_map(|p| {
                p.segments().iter().enumerate().map(|(i, s)| CheckpointSegment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values: p.segment_tensor(i).into_data(),
                })
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: self.spec.clone(),
            segments,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NnError> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(NnError::CheckpointMismatch(format!("unknown format {:?}", ckpt.format)));
        }
        let mut model = Self::init(ckpt.spec.clone())?;
        let mut remaining = ckpt.segments.iter();
        for part in [&mut model.backbone, &mut model.utility, &mut model.adversary] {
            let mut data = Vec::with_capacity(part.len());
            for expected in part.segments() {
                let seg = remaining
                    .next()
                    .ok_or_else(|| NnError::CheckpointMismatch(format!("missing segment {}", expected.name)))?;
                if seg.name != expected.name || seg.shape != expected.shape || seg.values.len() != expected.len() {
                    return Err(NnError::CheckpointMismatch(format!(
                        "segment {} {:?} does not match expected {} {:?}",
                        seg.name, seg.shape, expected.name, expected.shape
                    )));
                }
                data.extend_from_slice(&seg.values);
            }
            *part = ParamVector::from_flat(part, data)?;
        }
        if let Some(extra) = remaining.next() {
            return Err(NnError::CheckpointMismatch(format!(
                "unexpected segment {}",
                extra.name
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

pub const CHECKPOINT_FORMAT: &str = "curvmatch-checkpoint-v1";

/// On-disk model: spec header plus every named parameter segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: MlpSpec,
    pub segments: Vec<CheckpointSegment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSegment {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
