//! Named parameter storage and the per-pass forward context that binds
//! parameters into a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{relative_error, Gradients, Graph, Var};
use crate::error::Result;
use crate::ops::norm::RunningStats;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Convolution or dense kernel.
    Weight,
    /// Latent real-valued weights of a binary convolution.
    BinaryWeight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    /// Kernels enter the L2 penalty; biases and normalization affine terms do not.
    pub fn regularized(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::BinaryWeight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    stats: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name `{name}`");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0].1
    }

    pub fn stats_entries(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn stats_entries_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.stats
    }

    pub fn set_stats(&mut self, id: StatsId, stats: RunningStats) {
        self.stats[id.0].1 = stats;
    }

    /// `Σ ‖W‖²` over regularized parameters, in store order.
    pub fn l2_sum(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind.regularized())
            .map(|e| e.value.sq_norm())
            .sum()
    }
}

/// He (fan-in, normal) initialization: `N(0, 2 / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// One forward pass: owns the tape and binds store parameters lazily.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
    training: bool,
    stat_updates: Vec<(StatsId, RunningStats)>,
}

impl<'a> Forward<'a> {
    /// `track` makes parameters differentiable leaves; `training` selects batch
    /// statistics in normalization layers.
    pub fn new(store: &'a ParamStore, training: bool, track: bool) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track,
            training,
            stat_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.track {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn running_stats(&self, id: StatsId) -> &RunningStats {
        self.store.stats(id)
    }

    pub fn record_stats(&mut self, id: StatsId, stats: RunningStats) {
        self.stat_updates.push((id, stats));
    }

    pub fn take_stat_updates(&mut self) -> Vec<(StatsId, RunningStats)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Parameters not yet bound into this pass.
    pub fn unbound(&self) -> Vec<ParamId> {
        self.store.ids().filter(|id| self.bound[id.0].is_none()).collect()
    }

    /// Vars of every bound regularized parameter, in store order.
    pub fn regularized_vars(&mut self) -> Vec<Var> {
        let ids: Vec<ParamId> = self
            .store
            .ids()
            .filter(|&id| self.store.entry(id).kind.regularized())
            .collect();
        ids.into_iter().map(|id| self.param(id)).collect()
    }

    /// Per-parameter gradients in store order; unbound parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}

/// Central finite differences over store parameters against tape gradients.
/// `select` picks the parameters to probe; at most `per_param` scalars of each
/// are perturbed (evenly spaced). Each scalar is differenced at every step in
/// `steps` and scored by its best agreement, so a step that straddles a ReLU
/// or max kink does not mask a correct gradient. Returns the worst relative
/// error and the name of the parameter where it occurred.
pub fn param_grad_check<F, S>(
    store: &ParamStore,
    training: bool,
    f: F,
    select: S,
    per_param: usize,
    steps: &[f64],
) -> Result<(f64, String)>
where
    F: Fn(&mut Forward) -> Result<Var>,
    S: Fn(&ParamEntry) -> bool,
{
    let mut fw = Forward::new(store, training, true);
    let root = f(&mut fw)?;
    let mut grads = fw.graph.backward(root)?;
    let analytic = fw.param_grads(&mut grads);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut fw = Forward::new(s, training, false);
        let y = f(&mut fw)?;
        Ok(fw.graph.value(y).item())
    };
    let mut probe = store.clone();
    let mut worst = (0.0, String::new());
    for id in store.ids() {
        if !select(store.entry(id)) {
            continue;
        }
        let n = store.get(id).len();
        let step = (n / per_param.max(1)).max(1);
        for i in (0..n).step_by(step).take(per_param.max(1)) {
            let orig = store.get(id).data()[i];
            let mut err = f64::INFINITY;
            for &eps in steps {
                probe.get_mut(id).data_mut()[i] = orig + eps;
                let plus = eval(&probe)?;
                probe.get_mut(id).data_mut()[i] = orig - eps;
                let minus = eval(&probe)?;
                let numeric = (plus - minus) / (2.0 * eps);
                err = err.min(relative_error(analytic[id.0].data()[i], numeric));
            }
            probe.get_mut(id).data_mut()[i] = orig;
            if err > worst.0 {
                worst = (err, store.entry(id).name.clone());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_normal_variance_tracks_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = he_normal(&[200, 50], 50, &mut rng);
        let var = t.sq_norm() / t.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }

    #[test]
    fn l2_touches_only_kernels() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Weight, Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
        s.add("b", ParamKind::Bias, Tensor::full(&[3], 5.0));
        s.add("g", ParamKind::BnScale, Tensor::full(&[3], 1.0));
        assert_eq!(s.l2_sum(), 4.0);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Bias, Tensor::zeros(&[1]));
        s.add("a", ParamKind::Bias, Tensor::zeros(&[1]));
    }
}
