use crate::stochastics::PathBundle;

/// Per-path values stored one time step after another, so a single step is
/// a contiguous slice across paths.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrix {
    pub n_paths: usize,
    pub n_cols: usize,
    data: Vec<f64>,
}

impl StepMatrix {
    pub fn zeros(n_paths: usize, n_cols: usize) -> Self {
        StepMatrix { n_paths, n_cols, data: vec![0.0; n_paths * n_cols] }
    }

    #[inline]
    pub fn col(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_paths..(i + 1) * self.n_paths]
    }

    #[inline]
    pub fn col_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_paths..(i + 1) * self.n_paths]
    }

    #[inline]
    pub fn get(&self, path: usize, i: usize) -> f64 {
        self.data[i * self.n_paths + path]
    }

    /// Two consecutive columns, the second mutable.
    pub fn cols_pair_mut(&mut self, i: usize) -> (&[f64], &mut [f64]) {
        let (head, tail) = self.data.split_at_mut((i + 1) * self.n_paths);
        (&head[i * self.n_paths..], &mut tail[..self.n_paths])
    }

    /// Values of one path across all columns.
    pub fn path(&self, path: usize) -> Vec<f64> {
        (0..self.n_cols).map(|i| self.get(path, i)).collect()
    }

    /// Column means in path order (fixed summation order).
    pub fn col_mean(&self, i: usize) -> f64 {
        self.col(i).iter().sum::<f64>() / self.n_paths as f64
    }
}

/// Inventory-noise increments rearranged step-major.
pub fn dw_by_step(b: &PathBundle) -> StepMatrix {
    let mut m = StepMatrix::zeros(b.n_paths, b.n_steps);
    for p in 0..b.n_paths {
        for (i, &v) in b.dw_row(p).iter().enumerate() {
            m.data[i * b.n_paths + p] = v;
        }
    }
    m
}
