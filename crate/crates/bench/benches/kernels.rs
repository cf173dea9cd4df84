use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use wsss_bench::{scene, wave_tensor};
use wsss_core::annotation::propagate_scribbles;
use wsss_core::autodiff::Graph;
use wsss_core::losses::{full_loss, loss_graph, BatchTargets, FeatureMode, Group, LossConfig};
use wsss_core::network::{Mode, Network, NetworkConfig};
use wsss_core::superpixels::oversegment;
use wsss_core::trainer::nrgb_tensor;

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for &(cin, cout, side) in &[(3, 16, 64), (16, 32, 32), (64, 128, 8)] {
        let input = wave_tensor(&[4, cin, side, side], 0.1);
        let weight = wave_tensor(&[cout, cin, 3, 3], 0.7);
        let id = format!("{cin}x{cout}@{side}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(input.clone()).unwrap();
                let w = g.param(weight.clone()).unwrap();
                black_box(g.conv2d(x, w, None).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let x = g.param(input.clone()).unwrap();
                let w = g.param(weight.clone()).unwrap();
                let y = g.conv2d(x, w, None).unwrap();
                let l = g.sum(y).unwrap();
                black_box(g.backward(l).unwrap());
            })
        });
    }
    group.finish();
}

fn bench_slic(c: &mut Criterion) {
    let mut group = c.benchmark_group("slic");
    for &side in &[64, 128] {
        let (image, _, scribbles) = scene(side, 4, 5, 1);
        for &n in &[30, 80] {
            group.bench_with_input(BenchmarkId::new(format!("oversegment_{side}"), n), &n, |b, &n| {
                b.iter(|| black_box(oversegment(&image, n, 0).unwrap()))
            });
        }
        let map = oversegment(&image, 50, 0).unwrap();
        group.bench_function(format!("propagate_{side}"), |b| {
            b.iter(|| black_box(propagate_scribbles(&scribbles, &map).unwrap()))
        });
    }
    group.finish();
}

fn bench_loss(c: &mut Criterion) {
    let (image, full, scribbles) = scene(64, 4, 5, 2);
    let mut net = Network::new(NetworkConfig {
        feature_mode: FeatureMode::SoftmaxNrgb,
        ..NetworkConfig::default()
    })
    .unwrap();
    net.init_weights(3);
    let (seg, centroids) = net.forward(&[&image]).unwrap().remove(0);
    let input = net.batch_tensor(&[&image; 4]).unwrap();
    let targets = BatchTargets::new(&[&full; 4], &[&scribbles; 4]).unwrap();

    let mut group = c.benchmark_group("loss");
    for g in [Group::G1, Group::G2, Group::G3] {
        let config = LossConfig {
            group: g,
            feature_mode: FeatureMode::SoftmaxNrgb,
            ..LossConfig::default()
        };
        group.bench_function(format!("plain_{g:?}"), |b| {
            b.iter(|| black_box(full_loss(&config, &seg, &centroids, &full, &scribbles, &image).unwrap()))
        });
    }
    let config = LossConfig {
        group: Group::G3,
        feature_mode: FeatureMode::SoftmaxNrgb,
        ..LossConfig::default()
    };
    group.sample_size(10);
    group.bench_function("train_step_batch4", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let pass = net.forward_graph(&mut g, &input, Mode::Train).unwrap();
            let nrgb = g.constant(nrgb_tensor(&[&image; 4]).unwrap()).unwrap();
            let nodes = loss_graph(&mut g, &config, pass.seg, pass.centroids, Some(nrgb), &targets).unwrap();
            black_box(g.backward(nodes.total).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, bench_conv, bench_slic, bench_loss);
criterion_main!(benches);
