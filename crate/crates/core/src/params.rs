//! Named parameter tensors, non-trainable buffers, and the per-forward context
//! that binds them onto a tape.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Float, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// He-normal for ReLU convolutions with the given fan-in.
    Kaiming { fan_in: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferSpec {
    pub name: String,
    pub len: usize,
    pub fill: f64,
}

/// Collects the parameter layout while a model's modules are constructed.
#[derive(Default)]
pub struct ParamBuilder {
    specs: Vec<ParamSpec>,
    buffers: Vec<BufferSpec>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn buffer(&mut self, name: impl Into<String>, len: usize, fill: f64) -> BufferId {
        self.buffers.push(BufferSpec {
            name: name.into(),
            len,
            fill,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn finish(self) -> (Vec<ParamSpec>, Vec<BufferSpec>) {
        (self.specs, self.buffers)
    }
}

/// Values for every parameter of a model, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamStore<T: Float> {
    specs: Vec<ParamSpec>,
    values: Vec<Rc<ArrayD<T>>>,
}

impl<T: Float> ParamStore<T> {
    pub fn initialize(specs: Vec<ParamSpec>, rng: &mut ChaCha8Rng) -> Self {
        let values = specs
            .iter()
            .map(|spec| Rc::new(init_tensor(spec, rng)))
            .collect();
        ParamStore { specs, values }
    }

    pub fn zeros(specs: Vec<ParamSpec>) -> Self {
        let values = specs
            .iter()
            .map(|s| Rc::new(ArrayD::zeros(IxDyn(&s.shape))))
            .collect();
        ParamStore { specs, values }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_rc(&self, index: usize) -> Rc<ArrayD<T>> {
        self.values[index].clone()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.specs.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.specs[id.0].name
    }

    /// Mutable access; clones the tensor if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) -> Result<()> {
        if value.shape() != self.specs[id.0].shape.as_slice() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                self.specs[id.0].name,
                self.specs[id.0].shape,
                value.shape()
            )));
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
        self.set(id, value)
    }

    /// Zeros every parameter whose name satisfies `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut count = 0;
        for i in 0..self.specs.len() {
            if pred(&self.specs[i].name) {
                self.values[i] = Rc::new(ArrayD::zeros(IxDyn(&self.specs[i].shape)));
                count += 1;
            }
        }
        count
    }

    pub fn total_elements(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamSpec, &ArrayD<T>)> {
        self.specs.iter().zip(self.values.iter().map(|v| &**v))
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| Rc::new(v.mapv(|x| U::c(x.f64()))))
                .collect(),
        }
    }
}

fn init_tensor<T: Float>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let shape = IxDyn(&spec.shape);
    match spec.init {
        Init::Zeros => ArrayD::zeros(shape),
        Init::Ones => ArrayD::ones(shape),
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, 1.0).unwrap();
            ArrayD::from_shape_simple_fn(shape, || loop {
                let z: f64 = normal.sample(rng);
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
        }
        Init::Kaiming { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            ArrayD::from_shape_simple_fn(shape, || T::c(normal.sample(rng)))
        }
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferStore<T: Float> {
    specs: Vec<BufferSpec>,
    values: Vec<Vec<T>>,
}

impl<T: Float> BufferStore<T> {
    pub fn new(specs: Vec<BufferSpec>) -> Self {
        let values = specs.iter().map(|s| vec![T::c(s.fill); s.len]).collect();
        BufferStore { specs, values }
    }

    pub fn get(&self, id: BufferId) -> &[T] {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: BufferId, value: Vec<T>) {
        assert_eq!(value.len(), self.specs[id.0].len);
        self.values[id.0] = value;
    }

    pub fn specs(&self) -> &[BufferSpec] {
        &self.specs
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BufferSpec, &[T])> {
        self.specs.iter().zip(self.values.iter().map(|v| v.as_slice()))
    }

    pub fn id(&self, name: &str) -> Option<BufferId> {
        self.specs.iter().position(|s| s.name == name).map(BufferId)
    }

    pub fn cast<U: Float>(&self) -> BufferStore<U> {
        BufferStore {
            specs: self.specs.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.iter().map(|x| U::c(x.f64())).collect())
                .collect(),
        }
    }
}

/// Where an attention map was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSite {
    /// 1-based encoder layer.
    Encoder(usize),
    /// FPN stage, by position in the tap list.
    Fpn(usize),
    Decoder,
}

#[derive(Clone, Debug)]
pub struct AttentionRecord<T: Float> {
    pub site: AttentionSite,
    /// `[B, heads, N, N]` row-stochastic weights.
    pub weights: Rc<ArrayD<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a model's parameters to a tape for one forward pass.
pub struct Ctx<'t, T: Float> {
    pub tape: &'t Tape<T>,
    params: Vec<Var<'t, T>>,
    buffers: &'t BufferStore<T>,
    pub mode: Mode,
    drop_rng: RefCell<ChaCha8Rng>,
    record: bool,
    records: RefCell<Vec<AttentionRecord<T>>>,
    buffer_updates: RefCell<Vec<(BufferId, Vec<T>)>>,
}

impl<'t, T: Float> Ctx<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &ParamStore<T>, buffers: &'t BufferStore<T>, mode: Mode) -> Self {
        let vars = (0..params.len()).map(|i| tape.param(params.value_rc(i))).collect();
        Ctx {
            tape,
            params: vars,
            buffers,
            mode,
            drop_rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            record: false,
            records: RefCell::new(Vec::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// Enables retention of attention weights for probing.
    pub fn with_recording(mut self, on: bool) -> Self {
        self.record = on;
        self
    }

    /// Randomness for stochastic depth.
    pub fn with_drop_rng(self, rng: ChaCha8Rng) -> Self {
        *self.drop_rng.borrow_mut() = rng;
        self
    }

    pub fn p(&self, id: ParamId) -> Var<'t, T> {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var<'t, T>] {
        &self.params
    }

    pub fn buffer(&self, id: BufferId) -> &[T] {
        self.buffers.get(id)
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn recording(&self) -> bool {
        self.record
    }

    pub fn record(&self, site: AttentionSite, weights: Rc<ArrayD<T>>) {
        if self.record {
            self.records.borrow_mut().push(AttentionRecord { site, weights });
        }
    }

    pub fn take_records(&self) -> Vec<AttentionRecord<T>> {
        std::mem::take(&mut *self.records.borrow_mut())
    }

    pub fn push_buffer_update(&self, id: BufferId, value: Vec<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(BufferId, Vec<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Per-sample keep decisions for a residual branch dropped with
    /// probability `drop`; kept samples are rescaled by `1 / (1 - drop)`.
    pub fn drop_path_factors(&self, batch: usize, drop: f64) -> Vec<T> {
        let keep = 1.0 - drop;
        let mut rng = self.drop_rng.borrow_mut();
        (0..batch)
            .map(|_| {
                if rng.random::<f64>() < keep {
                    T::c(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_stays_within_two_sigma() {
        let mut pb = ParamBuilder::new();
        pb.add("w", &[64, 64], Init::TruncNormal(0.02));
        let (specs, _) = pb.finish();
        let store = ParamStore::<f64>::initialize(specs, &mut ChaCha8Rng::seed_from_u64(3));
        let w = store.get(ParamId(0));
        assert!(w.iter().all(|x| x.abs() <= 0.04));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        // A normal truncated at two sigma keeps about 77% of the variance.
        assert!((var.sqrt() - 0.02 * 0.88).abs() < 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn set_checks_shapes() {
        let mut pb = ParamBuilder::new();
        let id = pb.add("b", &[3], Init::Zeros);
        let (specs, _) = pb.finish();
        let mut store = ParamStore::<f32>::zeros(specs);
        assert!(store.set(id, ArrayD::zeros(IxDyn(&[4]))).is_err());
        assert!(store.set(id, ArrayD::ones(IxDyn(&[3]))).is_ok());
        assert_eq!(store.get(id).sum(), 3.0);
    }

    #[test]
    fn drop_path_keep_everything_at_zero_rate() {
        let tape = Tape::<f32>::new();
        let store = ParamStore::<f32>::zeros(vec![]);
        let buffers = BufferStore::new(vec![]);
        let cx = Ctx::new(&tape, &store, &buffers, Mode::Train);
        assert_eq!(cx.drop_path_factors(5, 0.0), vec![1.0; 5]);
        let f = cx.drop_path_factors(1000, 0.5);
        assert!(f.iter().all(|&x| x == 0.0 || x == 2.0));
        let kept = f.iter().filter(|&&x| x > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
