//! Shared fixtures for the criterion benches.

use std::hint::black_box;

use criterion::Criterion;
use memefuse::image_channel::ConvLayer;
use memefuse::preprocess::{preprocess, ReplacementLexicon};
use memefuse::synthetic::{small_config, SyntheticSet, SyntheticSpec};
use memefuse::tensor::init_uniform;
use memefuse::text_channel::{gru_step, lstm_step, GruCell, LstmCell};
use memefuse::trainer::batch_gradient;
use memefuse::{soft_vote, Member, MemberSpec, Prediction, Rng, Sample, Tensor};

const CAPTION: &str = "When u finally get 2 the weekend and ur boss calls https://t.co/x lol \
                       idk what 2 say tbh!!! #mondays";

/// One synthetic sample plus a freshly initialised member for every spec.
pub struct Fixture {
    pub sample: Sample,
    pub members: Vec<Member>,
}

impl Fixture {
    pub fn new() -> Self {
        let set = SyntheticSet::generate(SyntheticSpec {
            records: 8,
            ..SyntheticSpec::default()
        })
        .expect("synthetic set");
        let cfg = set.configure(small_config(3));
        let dims = cfg.model_dims().expect("dims");
        let sample = set.samples(&cfg).expect("samples").swap_remove(0);
        let mut rng = Rng::new(7);
        let members = MemberSpec::all()
            .into_iter()
            .map(|s| Member::new(s, &dims, &mut rng).expect("member"))
            .collect();
        Fixture { sample, members }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Fixture::new()
    }
}

fn recurrent(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let (input, hidden) = (300, 160);
    let x = init_uniform(&mut rng, &[input], 1.0).unwrap();
    let h = Tensor::zeros(&[hidden]);
    let lstm = LstmCell::new(input, hidden, &mut rng);
    let gru = GruCell::new(input, hidden, &mut rng);
    c.bench_function("lstm_step_300x160", |b| b.iter(|| lstm_step(&lstm, &h, &h, black_box(&x)).unwrap()));
    c.bench_function("gru_step_300x160", |b| b.iter(|| gru_step(&gru, &h, black_box(&x)).unwrap()));
}

fn convolution(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let layer = ConvLayer::new(3, 64, 3, &mut rng).unwrap();
    let image = init_uniform(&mut rng, &[64, 64, 3], 1.0).unwrap();
    c.bench_function("conv_64x64x3_to_64", |b| b.iter(|| layer.forward(black_box(&image)).unwrap()));
}

fn members(c: &mut Criterion) {
    let fx = Fixture::new();
    let mut group = c.benchmark_group("member_forward");
    for m in &fx.members {
        group.bench_function(m.spec.label(), |b| b.iter(|| m.predict(black_box(&fx.sample)).unwrap()));
    }
    group.finish();

    let cfg = small_config(3).train_config();
    let batch = vec![&fx.sample; 20];
    c.bench_function("batch_gradient_4:1_x20", |b| {
        b.iter(|| batch_gradient(&fx.members[6], black_box(&batch), &cfg, None).unwrap())
    });
}

fn voting(c: &mut Criterion) {
    let preds: Vec<Prediction> = (0..8)
        .map(|i| {
            let a = 0.1 + 0.1 * i as f64;
            Prediction::new(vec![a, (1.0 - a) / 2.0, (1.0 - a) / 2.0]).unwrap()
        })
        .collect();
    c.bench_function("soft_vote_8x3", |b| b.iter(|| soft_vote(black_box(&preds), None).unwrap()));
}

fn text(c: &mut Criterion) {
    let lex = ReplacementLexicon::default();
    c.bench_function("preprocess_caption", |b| b.iter(|| preprocess(black_box(CAPTION), &lex)));
}

pub fn benchmarks(c: &mut Criterion) {
    text(c);
    recurrent(c);
    convolution(c);
    members(c);
    voting(c);
}
