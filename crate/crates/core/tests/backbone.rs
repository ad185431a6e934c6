use rand::Rng;

use lska_core::attention::{build_attention, AttentionModule, AttentionVariant, KernelSpec, KERNEL_SIZES};
use lska_core::autodiff::{Recordable, Tape, Var};
use lska_core::init;
use lska_core::tensor::{Shape, Tensor};
use lska_core::van::{build_van, input_gradient, Capacity, ModelConfig, Target};
use lska_core::Result;

use AttentionVariant::{Lka, LkaTrivial, Lska};

struct AttentionStack(Vec<AttentionModule>);

impl Recordable for AttentionStack {
    fn record<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<Var> {
        self.0.iter().try_fold(input, |x, m| m.record(tape, "stack", x))
    }
}

fn support(g: &Tensor) -> Vec<bool> {
    let s = g.shape();
    (0..s.plane()).map(|i| (0..s.c).any(|c| g.plane(0, c)[i] != 0.0)).collect()
}

#[test]
fn attention_only_gradient_support_grows_with_kernel() {
    let x = Tensor::uniform(Shape::new(1, 4, 64, 64), 1.0, &mut init::rng(3));
    let stack = |k| {
        let spec = KernelSpec::standard(k).unwrap();
        AttentionStack((0..2).map(|s| build_attention(Lska, spec, 4, s).unwrap()).collect())
    };
    let small = support(&input_gradient(&stack(7), &x, Target::Center).unwrap());
    let large = support(&input_gradient(&stack(23), &x, Target::Center).unwrap());
    assert!(small.iter().zip(&large).all(|(s, l)| !s || *l));
    let (ns, nl) = (small.iter().filter(|b| **b).count(), large.iter().filter(|b| **b).count());
    // two stacked k x k fields reach (2k - 1)^2 cells
    assert_eq!((ns, nl), (13 * 13, 45 * 45));
}

#[test]
fn tiny_input_gradient_matches_finite_differences() {
    let model = build_van(&ModelConfig::new(Capacity::Tiny, Lska, KernelSpec::new(7, 2)).with_seed(5))
        .unwrap()
        .with_layer_scale(0.5);
    let mut rng = init::rng(8);
    let x = Tensor::uniform(Shape::new(1, 3, 64, 64), 1.0, &mut rng);
    let g = input_gradient(&model.feature_extractor(), &x, Target::Center).unwrap();
    let target = |x: &Tensor| {
        let f = model.features(x).unwrap();
        let s = f.shape();
        (0..s.c).map(|c| f.get(0, c, s.h / 2, s.w / 2)).sum::<f64>()
    };
    let scale = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        // bias coordinates toward the center where the gradient lives
        let (c, y, xw) = (rng.random_range(0..3), rng.random_range(16..48), rng.random_range(16..48));
        let i = x.offset(0, c, y, xw);
        let mut p = x.clone().into_data();
        p[i] += h;
        let plus = target(&Tensor::from_vec(x.shape(), p.clone()).unwrap());
        p[i] -= 2.0 * h;
        let minus = target(&Tensor::from_vec(x.shape(), p).unwrap());
        let fd = (plus - minus) / (2.0 * h);
        let a = g.data()[i];
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3 * scale));
    }
    assert!(worst <= 1e-4, "max rel err {worst:e}");
}

#[test]
fn parameter_ordering_across_kernels() {
    for &k in &KERNEL_SIZES {
        let count = |v| {
            build_van(&ModelConfig::new(Capacity::Tiny, v, KernelSpec::standard(k).unwrap()))
                .unwrap()
                .count_params()
        };
        let (s, l, t) = (count(Lska), count(Lka), count(LkaTrivial));
        assert!(s < l && l < t, "k={k}: {s} {l} {t}");
    }
}

#[test]
fn lska_params_grow_affinely_at_fixed_dilation() {
    let d = 3;
    let count = |k| {
        build_van(&ModelConfig::new(Capacity::Tiny, Lska, KernelSpec::new(k, d)))
            .unwrap()
            .count_params() as i64
    };
    // channels summed over every block: 3*32 + 3*64 + 5*160 + 2*256
    let weighted: i64 = 1600;
    let base = count(23);
    for k in [11usize, 35, 53, 65] {
        let expect = weighted * 2 * ((k / d) as i64 - (23 / d) as i64);
        assert_eq!(count(k) - base, expect, "k={k}");
    }
}

#[test]
fn attention_forward_is_hadamard_of_map_and_input() {
    let m = build_attention(Lka, KernelSpec::standard(11).unwrap(), 3, 4).unwrap();
    let x = Tensor::uniform(Shape::new(2, 3, 12, 10), 1.0, &mut init::rng(4));
    let a = m.attention_map(&x).unwrap();
    let y = m.forward(&x).unwrap();
    for ((y, a), x) in y.data().iter().zip(a.data()).zip(x.data()) {
        assert_eq!(*y, a * x);
    }
}
