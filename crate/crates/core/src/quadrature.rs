//! Composite Gauss-Legendre rules on intervals and ordered simplices.
//!
//! Simplex rules nest one-dimensional composite rules that share a single
//! panel grid, so every kink of a time-ordered integrand at `s_i = s_j`
//! falls on a sub-interval boundary.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

/// Default cap on the number of quadrature points a single rule may emit.
pub const DEFAULT_NODE_BUDGET: usize = 20_000_000;

#[derive(Debug, Clone)]
pub struct GaussRule {
    reference: Vec<(f64, f64)>,
}

impl GaussRule {
    pub fn new(order: usize) -> Result<Self> {
        let n =
            NonZeroUsize::new(order).ok_or_else(|| Error::InvalidParameter("Gauss-Legendre order must be positive".into()))?;
        let rule = GaussLegendre::new(n);
        let mut reference: Vec<(f64, f64)> = rule.as_node_weight_pairs().to_vec();
        reference.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { reference })
    }

    pub fn order(&self) -> usize {
        self.reference.len()
    }

    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.reference.iter().map(move |&(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate(&self, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }
}

/// A panel partition of `[lower, upper]` carrying a fixed per-panel rule.
#[derive(Debug, Clone)]
pub struct PanelGrid {
    edges: Vec<f64>,
    rule: GaussRule,
}

impl PanelGrid {
    pub fn uniform(lower: f64, upper: f64, max_width: f64, order: usize) -> Result<Self> {
        if !(upper > lower) || !(max_width > 0.0) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "panel grid needs lower < upper and positive width, got [{lower}, {upper}] width {max_width}"
            )));
        }
        let panels = ((upper - lower) / max_width).ceil().max(1.0) as usize;
        let h = (upper - lower) / panels as f64;
        let mut edges: Vec<f64> = (0..panels).map(|k| lower + h * k as f64).collect();
        edges.push(upper);
        Ok(Self { edges, rule: GaussRule::new(order)? })
    }

    pub fn from_edges(edges: Vec<f64>, order: usize) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("panel edges must be strictly increasing".into()));
        }
        Ok(Self { edges, rule: GaussRule::new(order)? })
    }

    /// Same interval with every panel split in two.
    pub fn refined(&self) -> Self {
        let mut edges = Vec::with_capacity(2 * self.edges.len());
        for w in self.edges.windows(2) {
            edges.push(w[0]);
            edges.push(0.5 * (w[0] + w[1]));
        }
        edges.push(*self.edges.last().expect("non-empty"));
        Self { edges, rule: self.rule.clone() }
    }

    pub fn lower(&self) -> f64 {
        self.edges[0]
    }

    pub fn upper(&self) -> f64 {
        *self.edges.last().expect("non-empty")
    }

    pub fn panel_count(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    pub fn nodes(&self) -> Vec<(f64, f64)> {
        self.nodes_below(self.upper())
    }

    /// Nodes for `[lower, cap]`: complete panels below `cap` plus one partial panel.
    pub fn nodes_below(&self, cap: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for w in self.edges.windows(2) {
            if w[0] >= cap {
                break;
            }
            let b = w[1].min(cap);
            out.extend(self.rule.mapped(w[0], b));
        }
        out
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes().into_iter().map(|(x, w)| w * f(x)).sum()
    }

    /// Points of `upper > s_1 > … > s_dim > lower` with product weights.
    pub fn simplex(&self, dim: usize, budget: usize) -> Result<Vec<(Vec<f64>, f64)>> {
        let estimate = simplex_size_estimate(self.panel_count() * self.order(), dim);
        if estimate > budget as f64 {
            return Err(Error::QuadratureBudgetExceeded { nodes: estimate as usize, budget });
        }
        let mut out = Vec::new();
        let mut prefix = Vec::with_capacity(dim);
        self.simplex_rec(dim, self.upper(), 1.0, &mut prefix, &mut out);
        Ok(out)
    }

    fn simplex_rec(&self, remaining: usize, cap: f64, weight: f64, prefix: &mut Vec<f64>, out: &mut Vec<(Vec<f64>, f64)>) {
        if remaining == 0 {
            out.push((prefix.clone(), weight));
            return;
        }
        for (x, w) in self.nodes_below(cap) {
            prefix.push(x);
            self.simplex_rec(remaining - 1, x, weight * w, prefix, out);
            prefix.pop();
        }
    }

    /// Tensor-product points on `[lower, upper]^dim`.
    pub fn cube(&self, dim: usize, budget: usize) -> Result<Vec<(Vec<f64>, f64)>> {
        let base = self.nodes();
        let total = (base.len() as f64).powi(dim as i32);
        if total > budget as f64 {
            return Err(Error::QuadratureBudgetExceeded { nodes: total as usize, budget });
        }
        let mut out: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
        for _ in 0..dim {
            let mut next = Vec::with_capacity(out.len() * base.len());
            for (p, w) in &out {
                for &(x, wx) in &base {
                    let mut q = p.clone();
                    q.push(x);
                    next.push((q, w * wx));
                }
            }
            out = next;
        }
        Ok(out)
    }
}

fn simplex_size_estimate(per_axis: usize, dim: usize) -> f64 {
    let mut v = 1.0;
    for k in 0..dim {
        v *= (per_axis + k) as f64 / (k + 1) as f64;
    }
    v
}
