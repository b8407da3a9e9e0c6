//! Fixtures shared by the benchmarks.

use lcm_lora::data::Dataset;
use lcm_lora::training::{draw_lcd_batch, prepare_lcd_batch, DistillConfig, LcdBatch};
use lcm_lora::{DatasetKind, DenoiserNet, LoraAdapter, LoraSpec, NetConfig, NoiseSchedule, Rng, ScheduleConfig, Tensor};

pub fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut s = Rng::new(seed).stream("bench", 0);
    Tensor::new(vec![rows, cols], s.normals(rows * cols)).expect("shape matches data")
}

pub struct Fixture {
    pub net: DenoiserNet,
    pub adapter: LoraAdapter,
    pub schedule: NoiseSchedule,
    pub data: Dataset,
}

/// Default-width denoiser with a rank-8 adapter on every weight.
pub fn fixture() -> Fixture {
    let rng = Rng::new(7);
    let net = DenoiserNet::new(NetConfig::default(), &mut rng.stream("init", 0)).expect("default net");
    let adapter = LoraAdapter::attach(&net, &LoraSpec::default(), &mut rng.stream("lora", 0)).expect("default adapter");
    let schedule = NoiseSchedule::from_config(&ScheduleConfig::default()).expect("default schedule");
    let data = DatasetKind::ring8().sample(4096, &rng).expect("ring8");
    Fixture { net, adapter, schedule, data }
}

impl Fixture {
    pub fn lcd_batch(&self, cfg: &DistillConfig, step: usize) -> LcdBatch {
        let rng = Rng::new(11);
        let draw = draw_lcd_batch(cfg, self.data.len(), self.data.dim(), &self.schedule, &rng, step).expect("draw");
        prepare_lcd_batch(&self.net, &self.schedule, cfg, &self.data, &draw).expect("batch")
    }
}
