use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::StepRecord;
use crate::losses::LossBundle;
use crate::{Error, Result};

pub const METRICS_HEADER: &str = "step,epoch,lr,prior,separation,concentration,recon_l1,recon_perceptual,kl,total";

/// Append-only CSV of step records.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Opens `path` for appending. Rows for steps at or after `next_step`
    /// (left over from a run that outlived its last checkpoint) are dropped,
    /// so a resumed run continues the file without duplicates.
    pub fn open(path: &Path, next_step: u64) -> Result<Self> {
        let kept = match fs::read_to_string(path) {
            Ok(text) => {
                let mut lines = text.lines();
                if lines.next() != Some(METRICS_HEADER) {
                    return Err(Error::Checkpoint(format!("{} has an unexpected header", path.display())));
                }
                let rows: Vec<&str> = lines
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s < next_step)
                    })
                    .collect();
                Some(rows.join("\n"))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut text = format!("{METRICS_HEADER}\n");
        if let Some(rows) = kept.filter(|r| !r.is_empty()) {
            text.push_str(&rows);
            text.push('\n');
        }
        let tmp = path.with_extension("csv.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, path)?;
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        let l = &r.loss;
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, l.prior, l.separation, l.concentration, l.recon_l1, l.recon_perceptual, l.kl, l.total
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Parses a metrics CSV back into `(step, epoch, lr, bundle)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, usize, f64, LossBundle)>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Checkpoint(format!("{} has an unexpected header", path.display())));
    }
    lines
        .map(|line| {
            let bad = || Error::Checkpoint(format!("malformed metrics row `{line}`"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad());
            }
            let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                n(2)?,
                LossBundle {
                    prior: n(3)?,
                    separation: n(4)?,
                    concentration: n(5)?,
                    recon_l1: n(6)?,
                    recon_perceptual: n(7)?,
                    kl: n(8)?,
                    total: n(9)?,
                },
            ))
        })
        .collect()
}
