//! Greedy sequential encoding and its replay.
//!
//! Encoding starts from an all-zero canvas. At every stage the refiner
//! proposes `K` refinements; the one with the lowest reconstruction loss
//! against the target is kept and its 1-based index recorded. Decoding runs
//! the same loop, taking the recorded index instead of searching.

mod pack;

pub use pack::{
    decode_code_file, encode_code_file, pack_code, read_code_file, unpack_code, write_code_file,
    Packing, CODE_FILE_MAGIC, CODE_FILE_VERSION,
};

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::refiner::Refiner;
use crate::tensor::{Scalar, Tensor};

/// Ordered stage choices `c_1..c_N`, each in `1..=K`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatentCode {
    options: usize,
    indices: Vec<usize>,
}

impl LatentCode {
    pub fn new(options: usize, indices: Vec<usize>) -> Result<Self> {
        if options == 0 {
            return Err(Error::InvalidArgument(
                "a code needs at least one option".into(),
            ));
        }
        if let Some((stage, &c)) = indices
            .iter()
            .enumerate()
            .find(|(_, &c)| c == 0 || c > options)
        {
            return Err(Error::InvalidArgument(format!(
                "index {c} at stage {} outside 1..={options}",
                stage + 1
            )));
        }
        Ok(LatentCode { options, indices })
    }

    /// Code of `stages` copies of index 1.
    pub fn first_option(options: usize, stages: usize) -> Result<Self> {
        Self::new(options, vec![1; stages])
    }

    pub fn options(&self) -> usize {
        self.options
    }

    pub fn stages(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `N * log2(K)` when `K` is a power of two.
    pub fn bits(&self) -> Option<usize> {
        self.options
            .is_power_of_two()
            .then(|| self.stages() * self.options.trailing_zeros() as usize)
    }
}

/// Reconstruction error used both to pick options and to train.
pub trait ReconstructionLoss {
    /// Loss of every refinement `[B, K, ...]` against its target `[B, ...]`,
    /// giving `[B, K]`.
    fn per_option<T: Scalar>(&self, g: &mut Graph<T>, refinements: Var, target: Var)
        -> Result<Var>;
}

/// Mean squared error over every element of an example.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSquaredError;

impl ReconstructionLoss for MeanSquaredError {
    fn per_option<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        refinements: Var,
        target: Var,
    ) -> Result<Var> {
        let mut shape = g.shape(target).to_vec();
        shape.insert(1, 1);
        let target = g.reshape(target, shape)?;
        g.mse_per(refinements, target, 2)
    }
}

/// Graph handles for one encoding pass over a batch.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// Per stage, the `[B, K]` option losses.
    pub losses: Vec<Var>,
    /// Per stage, the 0-based chosen option of every example.
    pub chosen: Vec<Vec<usize>>,
    /// Per stage, the `[B, ...]` canvas after the choice.
    pub reconstructions: Vec<Var>,
    pub batch: usize,
    pub options: usize,
}

/// Index of the smallest value; the first one wins ties.
pub fn argmin<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = j;
        }
    }
    best
}

/// Runs the greedy encoder for a batch `[B, ...data_shape]` on `g`.
///
/// With `forced` set (0-based, `[stage][example]`), the recorded choices are
/// replayed instead of searched. Losses stay differentiable with respect to
/// everything bound on the graph; choices themselves are constants.
pub fn encode_on_graph<T: Scalar, L: ReconstructionLoss>(
    g: &mut Graph<T>,
    refiner: &Refiner<T>,
    bound: &Bound,
    target: Var,
    loss: &L,
    forced: Option<&[Vec<usize>]>,
) -> Result<GraphTrace> {
    let cfg = refiner.config();
    let shape = g.shape(target).to_vec();
    if shape.len() != cfg.data_shape.len() + 1 || shape[1..] != cfg.data_shape[..] {
        return Err(Error::shape("encode", &shape, &cfg.data_shape));
    }
    if let Some(f) = forced {
        if f.len() != cfg.stages || f.iter().any(|s| s.len() != shape[0]) {
            return Err(Error::InvalidArgument(
                "forced choices do not match batch and stages".into(),
            ));
        }
    }
    let batch = shape[0];
    let per_option = cfg.data_len();
    let mut canvas = g.constant(Tensor::zeros(shape));
    let mut trace = GraphTrace {
        losses: Vec::with_capacity(cfg.stages),
        chosen: Vec::with_capacity(cfg.stages),
        reconstructions: Vec::with_capacity(cfg.stages),
        batch,
        options: cfg.options,
    };
    for stage in 1..=cfg.stages {
        let refinements = refiner.refine(g, bound, canvas, stage)?;
        if let Some(i) = g
            .value(refinements)
            .data()
            .iter()
            .position(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!(
                "refinement at stage {stage}, option {} of example {} is not finite",
                (i / per_option) % cfg.options + 1,
                i / (per_option * cfg.options)
            )));
        }
        let losses = loss.per_option(g, refinements, target)?;
        let choice: Vec<usize> = match forced {
            Some(f) => f[stage - 1].clone(),
            None => g
                .value(losses)
                .data()
                .chunks(cfg.options)
                .map(argmin)
                .collect(),
        };
        canvas = g.select(refinements, choice.clone())?;
        trace.losses.push(losses);
        trace.chosen.push(choice);
        trace.reconstructions.push(canvas);
    }
    Ok(trace)
}

/// What one stage of encoding saw and chose.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord<T> {
    /// Loss of each of the `K` options.
    pub losses: Vec<T>,
    /// 1-based chosen option.
    pub chosen: usize,
    /// Canvas after this stage.
    pub reconstruction: Tensor<T>,
}

/// Full record of encoding one example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodeTrace<T> {
    pub stages: Vec<StageRecord<T>>,
    pub code: LatentCode,
}

impl<T: Scalar> EncodeTrace<T> {
    /// The final reconstruction, obtained for free by encoding.
    pub fn reconstruction(&self) -> &Tensor<T> {
        &self
            .stages
            .last()
            .expect("at least one stage")
            .reconstruction
    }

    pub fn final_loss(&self) -> T {
        let last = self.stages.last().expect("at least one stage");
        last.losses[last.chosen - 1]
    }
}

/// Splits a graph trace into per-example value traces.
pub fn collect_traces<T: Scalar>(g: &Graph<T>, trace: &GraphTrace) -> Result<Vec<EncodeTrace<T>>> {
    let (batch, k) = (trace.batch, trace.options);
    let mut stages: Vec<Vec<StageRecord<T>>> = (0..batch).map(|_| Vec::new()).collect();
    for ((&losses, chosen), &recon) in trace
        .losses
        .iter()
        .zip(&trace.chosen)
        .zip(&trace.reconstructions)
    {
        let losses = g.value(losses).data();
        let recon = g.value(recon);
        for (b, records) in stages.iter_mut().enumerate() {
            records.push(StageRecord {
                losses: losses[b * k..(b + 1) * k].to_vec(),
                chosen: chosen[b] + 1,
                reconstruction: recon.slice_outer(b),
            });
        }
    }
    stages
        .into_iter()
        .map(|records| {
            let indices = records.iter().map(|r| r.chosen).collect();
            Ok(EncodeTrace {
                code: LatentCode::new(k, indices)?,
                stages: records,
            })
        })
        .collect()
}

/// Encodes a batch `[B, ...data_shape]`.
pub fn encode_batch<T: Scalar>(
    refiner: &Refiner<T>,
    xs: &Tensor<T>,
) -> Result<Vec<EncodeTrace<T>>> {
    let mut g = Graph::new();
    let bound = refiner.params().bind(&mut g, false);
    let target = g.constant(xs.clone());
    let trace = encode_on_graph(&mut g, refiner, &bound, target, &MeanSquaredError, None)?;
    collect_traces(&g, &trace)
}

/// Encodes one example shaped like the refiner's data.
pub fn encode<T: Scalar>(refiner: &Refiner<T>, x: &Tensor<T>) -> Result<EncodeTrace<T>> {
    let batched = with_batch_axis(refiner, x)?;
    Ok(encode_batch(refiner, &batched)?.remove(0))
}

/// Replays a batch of codes, returning `[B, ...data_shape]`.
pub fn decode_batch<T: Scalar>(refiner: &Refiner<T>, codes: &[LatentCode]) -> Result<Tensor<T>> {
    let cfg = refiner.config();
    if codes.is_empty() {
        return Err(Error::InvalidArgument("nothing to decode".into()));
    }
    for code in codes {
        if code.options() != cfg.options || code.stages() != cfg.stages {
            return Err(Error::ConfigMismatch(format!(
                "code has K={} N={}, model has K={} N={}",
                code.options(),
                code.stages(),
                cfg.options,
                cfg.stages
            )));
        }
    }
    let mut g = Graph::new();
    let bound = refiner.params().bind(&mut g, false);
    let mut shape = vec![codes.len()];
    shape.extend_from_slice(&cfg.data_shape);
    let mut canvas = g.constant(Tensor::zeros(shape));
    for stage in 1..=cfg.stages {
        let refinements = refiner.refine(&mut g, &bound, canvas, stage)?;
        let choice = codes.iter().map(|c| c.indices()[stage - 1] - 1).collect();
        canvas = g.select(refinements, choice)?;
    }
    Ok(g.value(canvas).clone())
}

pub fn decode<T: Scalar>(refiner: &Refiner<T>, code: &LatentCode) -> Result<Tensor<T>> {
    let out = decode_batch(refiner, std::slice::from_ref(code))?;
    out.reshape(refiner.config().data_shape.clone())
}

/// Draws a code uniformly from all `K^N` codes.
pub fn sample_code<R: Rng>(options: usize, stages: usize, rng: &mut R) -> Result<LatentCode> {
    LatentCode::new(
        options,
        (0..stages).map(|_| rng.random_range(1..=options)).collect(),
    )
}

/// A sample under the uniform prior over codes.
pub fn sample<T: Scalar, R: Rng>(
    refiner: &Refiner<T>,
    rng: &mut R,
) -> Result<(LatentCode, Tensor<T>)> {
    let cfg = refiner.config();
    let code = sample_code(cfg.options, cfg.stages, rng)?;
    let x = decode(refiner, &code)?;
    Ok((code, x))
}

fn with_batch_axis<T: Scalar>(refiner: &Refiner<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let cfg = refiner.config();
    if x.shape() != cfg.data_shape.as_slice() {
        return Err(Error::shape("encode", x.shape(), &cfg.data_shape));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&cfg.data_shape);
    x.clone().reshape(shape)
}


/// Most stage reconstructions shown by [`stage_strip`].
pub const MAX_STAGE_COLUMNS: usize = 20;

/// The target followed by the canvas after each of the first
/// `min(N, 20)` stages of encoding it.
pub fn stage_strip<T: Scalar>(refiner: &Refiner<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let trace = encode(refiner, x)?;
    let mut tiles = vec![x.clone()];
    tiles.extend(
        trace
            .stages
            .into_iter()
            .take(MAX_STAGE_COLUMNS)
            .map(|s| s.reconstruction),
    );
    Ok(tiles)
}
