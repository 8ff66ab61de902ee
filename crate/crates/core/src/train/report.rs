use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    /// Validation MSE at horizons 10, 30 and 50 (NaN when the rollout is shorter).
    pub val_mse: [f64; 3],
    pub rho_tot: f64,
    pub rho_sample: f64,
    /// Batches skipped for a non-finite loss or gradient.
    pub skipped_batches: usize,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunReport {
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl RunReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }

    /// Equality ignoring wall-clock times, bit-exact on the metrics.
    pub fn same_metrics(&self, other: &RunReport) -> bool {
        let key = |r: &EpochRecord| {
            let mut v = vec![r.train_nll, r.val_nll, r.rho_tot, r.rho_sample];
            v.extend(r.val_mse);
            (
                r.epoch,
                r.skipped_batches,
                v.into_iter().map(f64::to_bits).collect::<Vec<_>>(),
            )
        };
        self.config_hash == other.config_hash
            && self.best_epoch == other.best_epoch
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| key(a) == key(b))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,train_nll,val_nll,val_mse_10,val_mse_30,val_mse_50,rho_tot,rho_sample,skipped_batches,wall_secs\n",
        );
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.train_nll,
                r.val_nll,
                r.val_mse[0],
                r.val_mse[1],
                r.val_mse[2],
                r.rho_tot,
                r.rho_sample,
                r.skipped_batches,
                r.wall_secs
            );
        }
        s
    }

    /// Key-value summary of the run.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config_hash = \"{}\"", self.config_hash);
        let _ = writeln!(s, "epochs = {}", self.records.len());
        if let Some(b) = self.best() {
            let _ = writeln!(s, "best_epoch = {}", b.epoch);
            let _ = writeln!(s, "best_val_nll = {}", b.val_nll);
            let _ = writeln!(s, "best_rho_tot = {}", b.rho_tot);
            let _ = writeln!(s, "best_rho_sample = {}", b.rho_sample);
            let _ = writeln!(
                s,
                "best_val_mse = [{}, {}, {}]",
                b.val_mse[0], b.val_mse[1], b.val_mse[2]
            );
        }
        if let Some(l) = self.last() {
            let _ = writeln!(s, "final_rho_tot = {}", l.rho_tot);
            let _ = writeln!(s, "final_val_nll = {}", l.val_nll);
        }
        let total: f64 = self.records.iter().map(|r| r.wall_secs).sum();
        let _ = writeln!(s, "wall_secs = {total:.1}");
        s
    }
}
