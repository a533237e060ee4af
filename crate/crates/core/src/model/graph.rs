//! Layer graphs with residual units, and their execution.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::gradcheck::{probe_grad, probe_loss, Differentiable};
use crate::layers::ops::{self, Cache, StatUpdate, BN_MOMENTUM};
use crate::layers::{LayerSpec, Mode, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphRole {
    Full,
    Front,
    Rest,
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
}

impl NamedLayer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }
}

/// A bottleneck residual unit with an optional squeeze-and-excitation gate.
///
/// `out = shortcut(x) + main(x) ⊙ gate(main(x))` where the shortcut is the
/// identity (2×2 average-pooled when strided) zero-padded to the wider
/// output.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidUnit {
    pub name: String,
    pub index: usize,
    pub in_ch: usize,
    pub depth: usize,
    pub stride: usize,
    pub main: Vec<NamedLayer>,
    /// Empty when the unit has no excitation gate.
    pub se: Vec<NamedLayer>,
}

impl PyramidUnit {
    pub fn out_ch(&self) -> usize {
        4 * self.depth
    }

    fn shortcut_pool(&self) -> Option<NamedLayer> {
        (self.stride > 1).then(|| {
            NamedLayer::new(
                format!("{}.shortcut", self.name),
                LayerSpec::AvgPool {
                    kernel: self.stride,
                    stride: self.stride,
                },
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Layer(NamedLayer),
    Unit(PyramidUnit),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub role: GraphRole,
    /// Per-sample input shape, `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node>,
}

/// One primitive layer with resolved per-sample shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSite {
    pub name: String,
    pub spec: LayerSpec,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

#[derive(Debug)]
enum NodeTape<T> {
    Layer(Cache<T>),
    Unit(UnitTape<T>),
}

#[derive(Debug)]
struct UnitTape<T> {
    main: Vec<Cache<T>>,
    se: Vec<Cache<T>>,
    shortcut: Cache<T>,
    branch: Tensor<T>,
    gate: Option<Tensor<T>>,
    in_shape: Vec<usize>,
}

/// Everything a recorded forward pass keeps for its backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<NodeTape<T>>,
    pub stats: Vec<StatUpdate<T>>,
}

fn batched(n: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = vec![n];
    s.extend_from_slice(per_sample);
    s
}

impl ModelGraph {
    pub fn new(role: GraphRole, input_shape: Vec<usize>, nodes: Vec<Node>) -> Self {
        Self {
            role,
            input_shape,
            nodes,
        }
    }

    pub fn units(&self) -> impl Iterator<Item = &PyramidUnit> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Unit(u) => Some(u),
            Node::Layer(_) => None,
        })
    }

    /// Every primitive layer in execution order with per-sample shapes.
    pub fn sites(&self) -> Result<Vec<LayerSite>> {
        let mut out = Vec::new();
        let mut shape = batched(1, &self.input_shape);
        let push = |l: &NamedLayer, input: &[usize], out: &mut Vec<LayerSite>| -> Result<Vec<usize>> {
            let o = l.spec.output_shape(input)?;
            out.push(LayerSite {
                name: l.name.clone(),
                spec: l.spec.clone(),
                input: input[1..].to_vec(),
                output: o[1..].to_vec(),
            });
            Ok(o)
        };
        for node in &self.nodes {
            match node {
                Node::Layer(l) => shape = push(l, &shape, &mut out)?,
                Node::Unit(u) => {
                    let mut m = shape.clone();
                    for l in &u.main {
                        m = push(l, &m, &mut out)?;
                    }
                    let mut g = m.clone();
                    for l in &u.se {
                        g = push(l, &g, &mut out)?;
                    }
                    if let Some(pool) = u.shortcut_pool() {
                        push(&pool, &shape, &mut out)?;
                    }
                    shape = m;
                }
            }
        }
        Ok(out)
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = batched(1, &self.input_shape);
        for node in &self.nodes {
            match node {
                Node::Layer(l) => shape = l.spec.output_shape(&shape)?,
                Node::Unit(u) => {
                    for l in &u.main {
                        shape = l.spec.output_shape(&shape)?;
                    }
                }
            }
        }
        Ok(shape[1..].to_vec())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.sites()?.iter().map(|s| s.spec.trainable_count()).sum())
    }

    /// Fresh parameters for every layer, drawn from the `(seed, INIT)` stream.
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::INIT]);
        for site in self.sites()? {
            store.init_layer(&site.name, &site.spec, &mut r);
        }
        Ok(store)
    }

    /// Names of every parameter tensor the graph reads.
    pub fn param_names(&self) -> Result<Vec<String>> {
        Ok(self
            .sites()?
            .iter()
            .flat_map(|s| {
                s.spec
                    .params()
                    .into_iter()
                    .map(move |d| format!("{}.{}", s.name, d.suffix))
            })
            .collect())
    }

    /// The subset of `store` this graph reads.
    pub fn select_params<T: Real>(&self, store: &ParamStore<T>) -> Result<ParamStore<T>> {
        let names = self.param_names()?;
        for n in &names {
            if !store.contains(n) {
                return Err(Error::MissingParam(n.clone()));
            }
        }
        let set: std::collections::HashSet<&str> = names.iter().map(String::as_str).collect();
        Ok(store.subset(|k| set.contains(k)))
    }

    /// Checks that `store` holds every parameter with the right shape.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        for site in self.sites()? {
            for decl in site.spec.params() {
                let key = format!("{}.{}", site.name, decl.suffix);
                let got = store.value(&key)?.shape();
                if got != &decl.shape[..] {
                    return Err(Error::shape(format!("parameter {key}"), &decl.shape, got));
                }
            }
        }
        Ok(())
    }

    /// Textual manifest: one line per primitive layer.
    pub fn manifest(&self) -> Result<String> {
        let mut s = String::new();
        writeln!(s, "# role={:?} input={:?}", self.role, self.input_shape).unwrap();
        writeln!(s, "# name\tlayer\tin\tout\tparams").unwrap();
        for site in self.sites()? {
            writeln!(
                s,
                "{}\t{}\t{:?}\t{:?}\t{}",
                site.name,
                site.spec,
                site.input,
                site.output,
                site.spec.trainable_count()
            )
            .unwrap();
        }
        Ok(s)
    }

    fn check_input<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                format!("{:?} graph input", self.role),
                &batched(x.shape().first().copied().unwrap_or(1), &self.input_shape),
                x.shape(),
            ));
        }
        Ok(())
    }

    /// Runs the graph. With `record` a tape for [`ModelGraph::backward`] is
    /// returned. Running statistics are not touched here.
    pub fn run<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        self.check_input(x)?;
        let mut tape = Tape {
            nodes: Vec::new(),
            stats: Vec::new(),
        };
        let mut y = x.clone();
        for node in &self.nodes {
            match node {
                Node::Layer(l) => {
                    let f = ops::forward(&l.name, &l.spec, params, &y, mode, record)?;
                    if record {
                        tape.nodes.push(NodeTape::Layer(f.cache));
                        tape.stats.extend(f.stats);
                    }
                    y = f.output;
                }
                Node::Unit(u) => {
                    let (out, ut) = unit_forward(u, params, &y, mode, record, &mut tape.stats)?;
                    if let Some(ut) = ut {
                        tape.nodes.push(NodeTape::Unit(ut));
                    }
                    y = out;
                }
            }
        }
        Ok((y, record.then_some(tape)))
    }

    pub fn forward_eval<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(params, x, Mode::Eval, false)?.0)
    }

    /// Training-mode forward: batch statistics are used and folded into
    /// the running estimates.
    pub fn forward_train<T: Real>(&self, params: &mut ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape) = self.run(params, x, Mode::Train, true)?;
        let tape = tape.expect("recorded");
        apply_running_stats(params, &tape.stats)?;
        Ok((y, tape))
    }

    /// Eval-mode forward that still records, for back-propagating through
    /// frozen parts.
    pub fn forward_frozen<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape) = self.run(params, x, Mode::Eval, true)?;
        Ok((y, tape.expect("recorded")))
    }

    pub fn backward<T: Real>(&self, params: &mut ParamStore<T>, tape: &Tape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if tape.nodes.len() != self.nodes.len() {
            return Err(Error::invalid("tape does not belong to this graph"));
        }
        let mut g = dy.clone();
        for (node, nt) in self.nodes.iter().zip(&tape.nodes).rev() {
            g = match (node, nt) {
                (Node::Layer(l), NodeTape::Layer(c)) => ops::backward(&l.name, &l.spec, params, c, &g)?,
                (Node::Unit(u), NodeTape::Unit(ut)) => unit_backward(u, params, ut, &g)?,
                _ => return Err(Error::invalid("tape does not belong to this graph")),
            };
        }
        Ok(g)
    }
}

pub fn apply_running_stats<T: Real>(params: &mut ParamStore<T>, stats: &[StatUpdate<T>]) -> Result<()> {
    let m = T::lit(BN_MOMENTUM);
    let keep = T::one() - m;
    for st in stats {
        let rm = params.get_mut(&format!("{}.running_mean", st.layer))?;
        for (r, &v) in rm.value.data_mut().iter_mut().zip(&st.mean) {
            *r = keep * *r + m * v;
        }
        let rv = params.get_mut(&format!("{}.running_var", st.layer))?;
        for (r, &v) in rv.value.data_mut().iter_mut().zip(&st.var) {
            *r = keep * *r + m * v;
        }
    }
    Ok(())
}

fn chain_forward<T: Real>(
    layers: &[NamedLayer],
    params: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    record: bool,
    caches: &mut Vec<Cache<T>>,
    stats: &mut Vec<StatUpdate<T>>,
) -> Result<Tensor<T>> {
    let mut y = x.clone();
    for l in layers {
        let f = ops::forward(&l.name, &l.spec, params, &y, mode, record)?;
        if record {
            caches.push(f.cache);
            stats.extend(f.stats);
        }
        y = f.output;
    }
    Ok(y)
}

fn chain_backward<T: Real>(
    layers: &[NamedLayer],
    params: &mut ParamStore<T>,
    caches: &[Cache<T>],
    dy: Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = dy;
    for (l, c) in layers.iter().zip(caches).rev() {
        g = ops::backward(&l.name, &l.spec, params, c, &g)?;
    }
    Ok(g)
}

fn unit_forward<T: Real>(
    u: &PyramidUnit,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    record: bool,
    stats: &mut Vec<StatUpdate<T>>,
) -> Result<(Tensor<T>, Option<UnitTape<T>>)> {
    let mut main_c = Vec::new();
    let mut se_c = Vec::new();
    let branch = chain_forward(&u.main, params, x, mode, record, &mut main_c, stats)?;
    let (n, c) = (branch.dim(0), branch.dim(1));
    let s = branch.sample_len() / c;
    let gate = if u.se.is_empty() {
        None
    } else {
        Some(chain_forward(&u.se, params, &branch, mode, record, &mut se_c, stats)?)
    };
    let mut y = branch.clone();
    if let Some(g) = &gate {
        let gd = g.data();
        for (i, chunk) in y.data_mut().chunks_mut(s).enumerate() {
            let gv = gd[i];
            chunk.iter_mut().for_each(|v| *v *= gv);
        }
    }
    let (sc, sc_cache) = match u.shortcut_pool() {
        Some(pool) => {
            let f = ops::forward(&pool.name, &pool.spec, params, x, mode, record)?;
            (f.output, f.cache)
        }
        None => (x.clone(), Cache::None),
    };
    let cin = sc.dim(1);
    if cin > c || sc.sample_len() / cin != s {
        return Err(Error::shape(&u.name, &[n, c, 0, 0], sc.shape()));
    }
    for b in 0..n {
        let src = sc.sample(b);
        let dst = &mut y.sample_mut(b)[..cin * s];
        for (d, &v) in dst.iter_mut().zip(src) {
            *d += v;
        }
    }
    let tape = record.then(|| UnitTape {
        main: main_c,
        se: se_c,
        shortcut: sc_cache,
        branch,
        gate,
        in_shape: x.shape().to_vec(),
    });
    Ok((y, tape))
}

fn unit_backward<T: Real>(u: &PyramidUnit, params: &mut ParamStore<T>, t: &UnitTape<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c) = (dy.dim(0), dy.dim(1));
    let s = dy.sample_len() / c;
    let mut dbranch = dy.clone();
    if let Some(g) = &t.gate {
        let gd = g.data();
        let (dyd, bd) = (dy.data(), t.branch.data());
        let dgate = Tensor::from_fn(vec![n, c], |i| {
            crate::tensor::pairwise_sum_by(s, i * s, |j| dyd[j] * bd[j])
        });
        for (i, chunk) in dbranch.data_mut().chunks_mut(s).enumerate() {
            let gv = gd[i];
            chunk.iter_mut().for_each(|v| *v *= gv);
        }
        let via_gate = chain_backward(&u.se, params, &t.se, dgate)?;
        dbranch.add_assign(&via_gate)?;
    }
    let mut dx = chain_backward(&u.main, params, &t.main, dbranch)?;
    let cin = t.in_shape[1];
    let sc_shape = match u.shortcut_pool() {
        Some(_) => vec![n, cin, t.in_shape[2] / u.stride, t.in_shape[3] / u.stride],
        None => t.in_shape.clone(),
    };
    let dsc = Tensor::from_fn(sc_shape, |i| {
        let per = cin * s;
        dy.data()[(i / per) * c * s + i % per]
    });
    let dsc = match u.shortcut_pool() {
        Some(pool) => ops::backward(&pool.name, &pool.spec, params, &t.shortcut, &dsc)?,
        None => dsc,
    };
    dx.add_assign(&dsc)?;
    Ok(dx)
}

impl Differentiable for ModelGraph {
    fn loss(&self, params: &ParamStore<f64>, input: &Tensor<f64>) -> Result<f64> {
        Ok(probe_loss(&self.run(params, input, params.mode, false)?.0))
    }

    fn loss_and_grad(&self, params: &mut ParamStore<f64>, input: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
        let (y, tape) = self.run(params, input, params.mode, true)?;
        let dx = self.backward(params, &tape.expect("recorded"), &probe_grad(&y))?;
        Ok((probe_loss(&y), dx))
    }

    fn has_kinks(&self) -> bool {
        self.sites()
            .map(|s| s.iter().any(|l| l.spec.is_piecewise()))
            .unwrap_or(true)
    }
}
