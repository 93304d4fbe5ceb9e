use ndarray::{Array, ArrayViewD, ArrayViewMutD, Dimension};

/// A collection of named real-valued tensors with a fixed traversal order.
///
/// Optimizers, gradient checks and checkpoints all walk parameters through
/// this trait, so a gradient struct must list its tensors in the same order
/// as the parameters it belongs to.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(value);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every entry through `f32`.
    fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Euclidean norm over all entries.
    fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

impl<D: Dimension> Parameters for Array<f64, D> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        vec![("tensor".into(), self.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        vec![("tensor".into(), self.view_mut().into_dyn())]
    }
}

/// Adds `other` into `acc` tensor by tensor. Both must share a layout.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    for ((_, mut a), (_, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        a += &b;
    }
}
