use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded operation.
///
/// Called with the upstream gradient, the input values and the output value;
/// returns one optional gradient per input, in input order.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

// Creation order doubles as a topological order: an op can only be built
// after all of its inputs exist.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: RefCell<Option<Tensor>>,
}

/// A tensor taking part in one recorded computation.
#[derive(Clone)]
pub struct Var(Rc<Node>);

/// One executed operation, as listed by [`Var::trace`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub id: u64,
    pub op: &'static str,
    pub inputs: Vec<u64>,
}

impl Var {
    fn make(op: &'static str, value: Tensor, requires_grad: bool, inputs: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            value,
            requires_grad,
            inputs,
            backward,
            grad: RefCell::new(None),
        }))
    }

    /// A value that never receives a gradient.
    pub fn constant(value: Tensor) -> Var {
        Self::make("constant", value, false, Vec::new(), None)
    }

    /// A gradient-accumulating leaf.
    pub fn leaf(value: Tensor) -> Var {
        Self::make("leaf", value, true, Vec::new(), None)
    }

    /// Records an operation. When no input requires a gradient the inputs and
    /// backward closure are dropped immediately, so inference keeps no graph.
    pub fn from_op(op: &'static str, value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        if inputs.iter().any(Var::requires_grad) {
            Self::make(op, value, true, inputs, Some(backward))
        } else {
            Self::make(op, value, false, Vec::new(), None)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op(&self) -> &'static str {
        self.0.op
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Gradient-tracked nodes reachable from `self`, most recent first.
    fn reverse_order(&self) -> Vec<Var> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.id()) {
                continue;
            }
            stack.extend(v.0.inputs.iter().cloned());
            nodes.push(v);
        }
        nodes.sort_unstable_by(|a, b| b.id().cmp(&a.id()));
        nodes
    }

    /// Every operation reachable from `self`, producers before consumers.
    pub fn trace(&self) -> Vec<TraceEntry> {
        let mut order = self.reverse_order();
        order.reverse();
        order
            .iter()
            .map(|v| TraceEntry {
                id: v.id(),
                op: v.op(),
                inputs: v.0.inputs.iter().map(Var::id).collect(),
            })
            .collect()
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let mut grads: HashMap<u64, Tensor> = HashMap::new();
        grads.insert(self.id(), Tensor::full(self.shape(), 1.0));
        for node in self.reverse_order() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                Some(backward) => {
                    let inputs: Vec<&Tensor> = node.0.inputs.iter().map(Var::value).collect();
                    let input_grads = backward(&g, &inputs, node.value());
                    debug_assert_eq!(input_grads.len(), inputs.len(), "op {}", node.op());
                    for (input, ig) in node.0.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(ig.shape(), input.shape(), "grad shape from op {}", node.op());
                        match grads.get_mut(&input.id()) {
                            Some(acc) => acc.add_assign(&ig),
                            None => {
                                grads.insert(input.id(), ig);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id())
            .field("op", &self.op())
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

/// One forward pass: decides whether parameters are gradient leaves and keeps
/// each named parameter registered once, so repeated uses share a leaf.
pub struct Tape {
    grad_enabled: bool,
    params: RefCell<Vec<(String, Var)>>,
    lookup: RefCell<HashMap<String, usize>>,
}

impl Tape {
    /// A recording tape: parameters become leaves.
    pub fn new() -> Self {
        Tape {
            grad_enabled: true,
            params: RefCell::default(),
            lookup: RefCell::default(),
        }
    }

    /// A non-recording tape: parameters are constants and intermediates are
    /// released as soon as they go out of scope.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn param(&self, name: &str, value: &Tensor) -> Var {
        if let Some(&i) = self.lookup.borrow().get(name) {
            return self.params.borrow()[i].1.clone();
        }
        let var = if self.grad_enabled {
            Var::leaf(value.clone())
        } else {
            Var::constant(value.clone())
        };
        let mut params = self.params.borrow_mut();
        self.lookup.borrow_mut().insert(name.to_string(), params.len());
        params.push((name.to_string(), var.clone()));
        var
    }

    pub fn input(&self, value: Tensor) -> Var {
        Var::constant(value)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.borrow().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Gradients of every registered parameter; zeros where backward never
    /// reached the parameter.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params
            .borrow()
            .iter()
            .map(|(name, var)| {
                let g = var.grad().unwrap_or_else(|| Tensor::zeros(var.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
