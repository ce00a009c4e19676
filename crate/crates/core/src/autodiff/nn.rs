//! Parameterized layers built from tape ops.

use crate::autodiff::params::{Initializer, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::error::Result;

/// `y = x·W + b` with `W: inputs×outputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(prefix: &str, inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            inputs,
            outputs,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        store.insert(&self.weight, init.uniform(&[self.inputs, self.outputs], self.inputs))?;
        store.insert(&self.bias, init.uniform(&[self.outputs], self.inputs))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight, store.get(&self.weight)?);
        let b = tape.param(&self.bias, store.get(&self.bias)?);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, inputs: usize, hidden: usize, outputs: usize) -> Self {
        Mlp {
            fc1: Linear::new(&format!("{prefix}.fc1"), inputs, hidden),
            fc2: Linear::new(&format!("{prefix}.fc2"), hidden, outputs),
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        self.fc1.init(store, init)?;
        self.fc2.init(store, init)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn param_names(&self) -> [&str; 4] {
        [&self.fc1.weight, &self.fc1.bias, &self.fc2.weight, &self.fc2.bias]
    }
}
