use indexmap::IndexMap;

use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Lazily places named parameters on a tape, at most once each.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: IndexMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Binder { store, vars: IndexMap::new() }
    }

    pub fn var(&mut self, tape: &mut Tape<'a>, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = tape.param(self.store.expect(name));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// `x · W + b` using parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, tape: &mut Tape<'a>, prefix: &str, x: Var) -> Var {
        let w = self.var(tape, &format!("{prefix}.w"));
        let b = self.var(tape, &format!("{prefix}.b"));
        tape.linear(x, w, Some(b))
    }

    /// `x · W` using parameter `{prefix}.w`.
    pub fn linear_nobias(&mut self, tape: &mut Tape<'a>, prefix: &str, x: Var) -> Var {
        let w = self.var(tape, &format!("{prefix}.w"));
        tape.matmul(x, w)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
