use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lcm_lora::training::{lcd_loss_graph, DistillConfig};
use lcm_lora::{ConsistencyHead, Tape};
use lcm_lora_bench::fixture;

fn lcd_step(c: &mut Criterion) {
    let f = fixture();
    let head = ConsistencyHead::new(&f.schedule);
    let cfg = DistillConfig::default();
    let mut group = c.benchmark_group("lcd");
    group.sample_size(20);
    group.bench_function("prepare_batch256", |b| {
        let mut step = 0;
        b.iter(|| {
            step += 1;
            black_box(f.lcd_batch(&cfg, step))
        })
    });
    let batch = f.lcd_batch(&cfg, 1);
    group.bench_function("loss_and_grad_batch256", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = f.net.bind(&mut tape, false);
            let student = f.adapter.bind(&mut tape, true);
            let target = f.adapter.bind(&mut tape, false);
            let loss = lcd_loss_graph(&mut tape, &f.net, &params, &head, &f.schedule, &student, &target, &batch, cfg.distance)
                .unwrap();
            black_box(tape.backward(loss).unwrap())
        })
    });
    group.finish();
}

criterion_group!(benches, lcd_step);
criterion_main!(benches);
