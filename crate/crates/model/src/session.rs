//! Binds model parameters to an autodiff graph for one forward/backward pass.

use vcmr_tensor::graph::{Gradients, Graph, Var};
use vcmr_tensor::{Scalar, Tensor};

use crate::config::ModelConfig;
use crate::params::{Model, ParamId};
use crate::{ModelError, Result};

/// One evaluation of the model against a graph. Parameters are bound lazily:
/// the first use of a parameter inserts it as a graph leaf; later uses reuse
/// the same node, so each parameter appears exactly once per graph.
///
/// [`Session::bind_flat`] instead sources every parameter from slices of a
/// single rank-1 variable, which lets a finite-difference checker perturb the
/// whole parameter vector through one input.
pub struct Session<'a, T: Scalar> {
    model: &'a Model<T>,
    graph: &'a mut Graph<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(model: &'a Model<T>, graph: &'a mut Graph<T>) -> Self {
        let bound = vec![None; model.params.len()];
        Session { model, graph, bound }
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn g(&mut self) -> &mut Graph<T> {
        self.graph
    }

    pub fn graph_ref(&self) -> &Graph<T> {
        self.graph
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// The graph variable holding parameter `id`, binding it on first use.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let requires_grad = self.graph.train_mode();
        let v = self.graph.leaf(self.model.params.get(id).clone(), requires_grad)?;
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    /// Binds every parameter to a slice of `flat`, a rank-1 variable whose
    /// length equals the total scalar count, in registry order.
    pub fn bind_flat(&mut self, flat: Var) -> Result<()> {
        let total = self.model.params.scalar_count();
        let got = self.graph.shape(flat).to_vec();
        if got != [total] {
            return Err(ModelError::config(format!(
                "flat parameter vector has shape {got:?}, expected [{total}]"
            )));
        }
        let row = self.graph.reshape(flat, &[1, total])?;
        let mut offset = 0;
        for i in 0..self.model.params.len() {
            let id = ParamId::from_index(i);
            let shape = self.model.params.get(id).shape().to_vec();
            let numel: usize = shape.iter().product();
            let piece = self.graph.slice_cols(row, offset, numel)?;
            let shaped = self.graph.reshape(piece, &shape)?;
            self.bound[i] = Some(shaped);
            offset += numel;
        }
        Ok(())
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        Ok(self.graph.backward(loss)?)
    }

    /// Backward pass returning one gradient tensor per parameter, aligned
    /// with registry order; parameters absent from the graph get zeros.
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.graph.backward(loss)?;
        let mut out = Vec::with_capacity(self.model.params.len());
        for i in 0..self.model.params.len() {
            let id = ParamId::from_index(i);
            let tensor = match self.bound[i].and_then(|v| grads.take(v)) {
                Some(g) => g,
                None => Tensor::zeros(self.model.params.get(id).shape()),
            };
            out.push(tensor);
        }
        Ok(out)
    }
}
