use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lcm_lora::checkpoint::{save_adapter, save_net, SaveOptions};
use lcm_lora::training::{MetricsRow, Snapshot, TrainObserver};
use lcm_lora::{AdapterBundle, LoraAdapter, Role, RunConfig};

pub const RUN_ROOT_ENV: &str = "LCM_LORA_RUN_ROOT";

/// `<root>/<name>/` holding `config/<stage>.json`, `metrics/<stage>.csv`,
/// `checkpoints/` and `samples/`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path, name: &str, stage: &str, cfg: &RunConfig) -> Result<Self> {
        let path = root.join(name);
        for sub in ["config", "metrics", "checkpoints", "samples"] {
            fs::create_dir_all(path.join(sub)).with_context(|| format!("creating {}", path.join(sub).display()))?;
        }
        let text = serde_json::to_string_pretty(&cfg.effective())?;
        fs::write(path.join("config").join(format!("{stage}.json")), text + "\n")?;
        Ok(Self { path })
    }

    pub fn metrics(&self, stage: &str) -> PathBuf {
        self.path.join("metrics").join(format!("{stage}.csv"))
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.path.join("checkpoints").join(stage)
    }

    pub fn samples(&self, name: &str) -> PathBuf {
        self.path.join("samples").join(format!("{name}.csv"))
    }
}

/// Streams metrics rows to CSV and writes periodic snapshots next to the
/// final checkpoint.
pub struct RunObserver {
    csv: BufWriter<File>,
    snapshot_dir: PathBuf,
    stage: String,
    save: SaveOptions,
    verbose: bool,
}

impl RunObserver {
    pub fn new(run: &RunDir, stage: &str, save: SaveOptions, verbose: bool) -> Result<Self> {
        let mut csv = BufWriter::new(File::create(run.metrics(stage))?);
        writeln!(csv, "step,loss,ema_loss,wall_ms")?;
        Ok(Self {
            csv,
            snapshot_dir: run.path.join("checkpoints"),
            stage: stage.to_string(),
            save,
            verbose,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        Ok(())
    }

    fn role(&self) -> Role {
        if self.stage == "style" {
            Role::Style
        } else {
            Role::Acceleration
        }
    }

    fn snapshot_adapter(&self, dir: &Path, adapter: &LoraAdapter) -> lcm_lora::Result<()> {
        let bundle = AdapterBundle::new(adapter.clone(), self.role(), self.stage.clone());
        save_adapter(dir, &bundle, &self.save).map(|_| ())
    }
}

impl TrainObserver for RunObserver {
    fn on_metrics(&mut self, row: &MetricsRow) -> lcm_lora::Result<()> {
        writeln!(self.csv, "{},{:?},{:?},{}", row.step, row.loss, row.ema_loss, row.wall_ms)?;
        self.csv.flush()?;
        if self.verbose {
            eprintln!("{} step {:>6}  loss {:.6}  smoothed {:.6}", self.stage, row.step, row.loss, row.ema_loss);
        }
        Ok(())
    }

    fn on_snapshot(&mut self, step: usize, snapshot: Snapshot<'_>) -> lcm_lora::Result<()> {
        let dir = self.snapshot_dir.join(format!("{}-step{step}", self.stage));
        match snapshot {
            Snapshot::Net(net) => save_net(&dir, net, &self.save).map(|_| ()),
            Snapshot::Adapter(a) => self.snapshot_adapter(&dir, a),
        }
    }
}
