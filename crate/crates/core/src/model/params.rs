use super::{ModelConfig, ModelError};
use crate::featurize::RAW_CHANNELS;
use crate::rng::SeededRng;
use crate::scenegen::Category;
use crate::tensor::{Graph, Tensor, Var};
use std::collections::HashMap;

/// Starting bias for sigmoid outputs trained with focal loss, so the initial
/// positive probability is about 0.1.
pub const FOCAL_BIAS_INIT: f64 = -2.19;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// uniform(±1/√fan_in)
    FanIn(usize),
    Uniform(f64),
    Const(f64),
}

/// Every trainable tensor of the network, by name, in a fixed registration
/// order. Initialization draws from one stream in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

struct Registry {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Registry {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.entries.push((name, shape.to_vec(), init));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::FanIn(fan_in));
        self.add(format!("{prefix}.b"), &[fan_out], Init::FanIn(fan_in));
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) {
        let fan_in = k * k * cin;
        self.add(format!("{prefix}.w"), &[k, k, cin, cout], Init::FanIn(fan_in));
        self.add(format!("{prefix}.b"), &[cout], Init::FanIn(fan_in));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.g"), &[d], Init::Const(1.0));
        self.add(format!("{prefix}.b"), &[d], Init::Const(0.0));
    }

    /// Keys carry no bias: softmax ignores a shift shared by every key, so
    /// its gradient would be identically zero.
    fn attention(&mut self, prefix: &str, d: usize) {
        self.linear(&format!("{prefix}.q"), d, d);
        self.add(format!("{prefix}.k.w"), &[d, d], Init::FanIn(d));
        self.linear(&format!("{prefix}.v"), d, d);
        self.linear(&format!("{prefix}.o"), d, d);
        self.norm(&format!("{prefix}.ln"), d);
    }

    fn ffn(&mut self, prefix: &str, d: usize) {
        self.linear(&format!("{prefix}.1"), d, 2 * d);
        self.linear(&format!("{prefix}.2"), 2 * d, d);
        self.norm(&format!("{prefix}.ln"), d);
    }

    fn set(&mut self, name: &str, init: Init) {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.0 == name)
            .expect("registered above");
        entry.2 = init;
    }
}

fn layout(cfg: &ModelConfig) -> Registry {
    let d = cfg.d;
    let c = Category::ALL.len();
    let mut r = Registry {
        entries: Vec::new(),
    };
    r.linear("pillar.lin", RAW_CHANNELS, d);
    r.conv("pillar.conv1", 3, d, d);
    r.conv("pillar.conv2", 3, d, d);
    r.conv("heatmap.conv", 3, d, d);
    r.conv("heatmap.out", 1, d, c);
    r.set("heatmap.out.b", Init::Const(FOCAL_BIAS_INIT));
    r.add("text.embed".into(), &[cfg.vocab_size, d], Init::Uniform(1.0));
    r.add("text.pos".into(), &[cfg.max_tokens, d], Init::FanIn(d));
    for e in 0..cfg.n_e {
        let p = format!("enc{e}");
        r.attention(&format!("{p}.vself"), d);
        r.attention(&format!("{p}.tself"), d);
        r.attention(&format!("{p}.v2t"), d);
        r.attention(&format!("{p}.t2v"), d);
        r.ffn(&format!("{p}.vffn"), d);
        r.ffn(&format!("{p}.tffn"), d);
    }
    r.linear("proposal.1", d, d);
    r.linear("proposal.2", d, 1);
    r.set("proposal.2.b", Init::Const(FOCAL_BIAS_INIT));
    r.linear("query.proj", d, d);
    for l in 0..cfg.n_d {
        let p = format!("dec{l}");
        r.attention(&format!("{p}.self"), d);
        r.attention(&format!("{p}.text"), d);
        r.attention(&format!("{p}.visual"), d);
        r.ffn(&format!("{p}.ffn"), d);
    }
    r.linear("ident.1", d, d);
    r.linear("ident.2", d, 1);
    r.set("ident.2.b", Init::Const(FOCAL_BIAS_INIT));
    r.linear("reg.1", d, d);
    r.linear("reg.2", d, 8);
    r
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg).entries {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::FanIn(fan_in) => {
                    let a = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.range(-a, a)).collect()
                }
                Init::Uniform(a) => (0..n).map(|_| rng.range(-a, a)).collect(),
                Init::Const(v) => vec![v; n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data).expect("sized above"));
        }
        Self::from_parts(names, tensors)
    }

    fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds a parameter set from named tensors, checking they match the
    /// layout `cfg` implies.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let expected = layout(cfg).entries;
        if expected.len() != named.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&named) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
        }
        let (names, tensors) = named.into_iter().unzip();
        Ok(Self::from_parts(names, tensors))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|i| &self.tensors[*i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Group a parameter belongs to: the part of its name before the first dot.
    pub fn group(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    /// Registers every tensor as a trainable leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a [`ModelParams`], same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(i) => self.vars[*i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
