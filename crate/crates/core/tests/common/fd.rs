//! The finite-difference suite: one runner per differentiable operation,
//! each checking 20 randomized small instances and returning the worst
//! relative gradient error observed.

use sscf_core::cfc;
use sscf_core::losses::{self, EmbeddingSet};
use sscf_core::rng::Rng;
use sscf_core::tensor::{batchnorm2d, BnMode, BnStats, Tensor};

use super::{max_grad_error, randn, randn_offset_zero, random_functional};

pub const INSTANCES: usize = 20;

fn worst<F>(seed: u64, mut build: F) -> f64
where
    F: FnMut(&mut Rng) -> (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>),
{
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (inputs, f) = build(&mut rng);
        worst = worst.max(max_grad_error(&inputs, |xs| f(xs)));
    }
    worst
}

pub fn fd_elementwise() -> f64 {
    worst(101, |rng| {
        let a = randn(&[3, 4], 1.0, rng).requires_grad_(true);
        let b = randn(&[3, 4], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[3, 4], rng);
        (
            vec![a, b],
            Box::new(move |xs| {
                let y = xs[0].mul(&xs[1]).unwrap().add(&xs[0]).unwrap().sub(&xs[1]).unwrap();
                y.mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_exp_log_powf() -> f64 {
    worst(102, |rng| {
        let raw: Vec<f64> = (0..12).map(|_| rng.uniform(0.5, 2.5)).collect();
        let a = Tensor::param(&[12], raw).unwrap();
        let r = random_functional(&[12], rng);
        (
            vec![a],
            Box::new(move |xs| {
                let y = xs[0].exp().log().mul(&xs[0].powf(-0.5)).unwrap();
                y.mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_matmul() -> f64 {
    worst(103, |rng| {
        let a = randn(&[3, 4], 1.0, rng).requires_grad_(true);
        let b = randn(&[4, 2], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[3, 2], rng);
        (
            vec![a, b],
            Box::new(move |xs| xs[0].matmul(&xs[1]).unwrap().mul(&r).unwrap().sum_all()),
        )
    })
}

pub fn fd_reductions_layout() -> f64 {
    worst(104, |rng| {
        let a = randn(&[2, 3, 4], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[4, 2], rng);
        (
            vec![a],
            Box::new(move |xs| {
                let y = xs[0]
                    .permute(&[2, 0, 1])
                    .unwrap()
                    .mean_axis(2)
                    .unwrap()
                    .reshape(&[4, 2])
                    .unwrap();
                let z = xs[0].sum_axis(0).unwrap().sum_all();
                y.mul(&r).unwrap().sum_all().add(&z.mul_scalar(0.25)).unwrap()
            }),
        )
    })
}

pub fn fd_channel_broadcasts() -> f64 {
    worst(105, |rng| {
        let x = randn(&[2, 3, 2, 2], 1.0, rng).requires_grad_(true);
        let bias = randn(&[3], 1.0, rng).requires_grad_(true);
        let scale = randn(&[3], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[2, 3, 2, 2], rng);
        (
            vec![x, bias, scale],
            Box::new(move |xs| {
                xs[0]
                    .mul_channel(&xs[2])
                    .unwrap()
                    .add_channel(&xs[1])
                    .unwrap()
                    .mul(&r)
                    .unwrap()
                    .sum_all()
            }),
        )
    })
}

pub fn fd_conv2d() -> f64 {
    worst(107, |rng| {
        let stride = 1 + rng.below(2);
        let x = randn(&[2, 2, 4, 4], 1.0, rng).requires_grad_(true);
        let w = randn(&[3, 2, 3, 3], 0.5, rng).requires_grad_(true);
        let ho = (4 + 2 - 3) / stride + 1;
        let r = random_functional(&[2, 3, ho, ho], rng);
        (
            vec![x, w],
            Box::new(move |xs| {
                xs[0].conv2d(&xs[1], stride, 1).unwrap().mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_conv4d() -> f64 {
    worst(109, |rng| {
        let x = randn(&[1, 2, 2, 2, 2], 1.0, rng).requires_grad_(true);
        let w = randn(&[2, 1, 3, 3, 3, 3], 0.3, rng).requires_grad_(true);
        let r = random_functional(&[2, 2, 2, 2, 2], rng);
        (
            vec![x, w],
            Box::new(move |xs| xs[0].conv4d(&xs[1]).unwrap().mul(&r).unwrap().sum_all()),
        )
    })
}

pub fn fd_unfold() -> f64 {
    worst(111, |rng| {
        let x = randn(&[1, 2, 3, 3], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[1, 2, 3, 3, 3, 3], rng);
        (
            vec![x],
            Box::new(move |xs| xs[0].unfold(3, 3).unwrap().mul(&r).unwrap().sum_all()),
        )
    })
}

pub fn fd_softmax() -> f64 {
    worst(112, |rng| {
        let axis = rng.below(2);
        let x = randn(&[3, 4], 2.0, rng).requires_grad_(true);
        let r = random_functional(&[3, 4], rng);
        (
            vec![x],
            Box::new(move |xs| xs[0].softmax(axis).unwrap().mul(&r).unwrap().sum_all()),
        )
    })
}

pub fn fd_normalize_cosine() -> f64 {
    worst(113, |rng| {
        let a = randn_offset_zero(&[6], rng).requires_grad_(true);
        let b = randn_offset_zero(&[6], rng).requires_grad_(true);
        (
            vec![a, b],
            Box::new(move |xs| {
                let cos = xs[0].cosine(&xs[1]).unwrap();
                let n = xs[0].normalize(0).unwrap().sum_all();
                cos.add(&n.mul_scalar(0.5)).unwrap()
            }),
        )
    })
}

pub fn fd_cross_entropy() -> f64 {
    worst(114, |rng| {
        let x = randn(&[4, 5], 2.0, rng).requires_grad_(true);
        let labels: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
        (
            vec![x],
            Box::new(move |xs| xs[0].cross_entropy_logits(&labels).unwrap()),
        )
    })
}

pub fn fd_batchnorm_train() -> f64 {
    worst(115, |rng| {
        let x = randn(&[3, 2, 3, 3], 1.0, rng).requires_grad_(true);
        let gamma =
            Tensor::param(&[2], vec![rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)]).unwrap();
        let beta = randn(&[2], 0.5, rng).requires_grad_(true);
        let r = random_functional(&[3, 2, 3, 3], rng);
        (
            vec![x, gamma, beta],
            Box::new(move |xs| {
                let (y, _) =
                    batchnorm2d(&xs[0], &xs[1], &xs[2], &BnStats::new(2), BnMode::Train).unwrap();
                y.mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_batchnorm_eval() -> f64 {
    worst(116, |rng| {
        let x = randn(&[2, 2, 3, 3], 1.0, rng).requires_grad_(true);
        let gamma = randn_offset_zero(&[2], rng).requires_grad_(true);
        let beta = randn(&[2], 0.5, rng).requires_grad_(true);
        let mut stats = BnStats::new(2);
        stats.update(
            &[rng.normal(), rng.normal()],
            &[rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)],
        );
        let r = random_functional(&[2, 2, 3, 3], rng);
        (
            vec![x, gamma, beta],
            Box::new(move |xs| {
                let (y, _) = batchnorm2d(&xs[0], &xs[1], &xs[2], &stats, BnMode::Eval).unwrap();
                y.mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_attention_maps() -> f64 {
    worst(117, |rng| {
        let c = randn(&[2, 2, 2, 2], 1.5, rng).requires_grad_(true);
        let rq = random_functional(&[2, 2], rng);
        let rs = random_functional(&[2, 2], rng);
        (
            vec![c],
            Box::new(move |xs| {
                let (a_q, a_s) = cfc::attention_maps(&xs[0], 2.5).unwrap();
                a_q.mul(&rq)
                    .unwrap()
                    .sum_all()
                    .add(&a_s.mul(&rs).unwrap().sum_all())
                    .unwrap()
            }),
        )
    })
}

pub fn fd_attended_pool() -> f64 {
    worst(118, |rng| {
        let f = randn(&[3, 2, 2], 1.0, rng).requires_grad_(true);
        let a = randn(&[2, 2], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[3], rng);
        (
            vec![f, a],
            Box::new(move |xs| {
                cfc::attended_pool(&xs[0], &xs[1]).unwrap().mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_cross_correlation() -> f64 {
    worst(119, |rng| {
        let q = randn_offset_zero(&[3, 2, 2], rng).requires_grad_(true);
        let s = randn_offset_zero(&[3, 2, 2], rng).requires_grad_(true);
        let r = random_functional(&[2, 2, 2, 2], rng);
        (
            vec![q, s],
            Box::new(move |xs| {
                cfc::cross_correlation(&xs[0], &xs[1])
                    .unwrap()
                    .mul(&r)
                    .unwrap()
                    .sum_all()
            }),
        )
    })
}

pub fn fd_self_correlation() -> f64 {
    worst(120, |rng| {
        let f0 = randn_offset_zero(&[1, 1, 3, 3, 3], rng).requires_grad_(true);
        let r = random_functional(&[1, 1, 3, 3, 3, 5, 5], rng);
        (
            vec![f0],
            Box::new(move |xs| {
                sscf_core::sfe::self_correlation(&xs[0], 5, 5)
                    .unwrap()
                    .mul(&r)
                    .unwrap()
                    .sum_all()
            }),
        )
    })
}

pub fn fd_tet_loss() -> f64 {
    worst(121, |rng| {
        let logits = randn(&[3, 2, 4], 2.0, rng).requires_grad_(true);
        let labels: Vec<usize> = (0..2).map(|_| rng.below(4)).collect();
        (
            vec![logits],
            Box::new(move |xs| losses::tet_loss(&xs[0], &labels).unwrap()),
        )
    })
}

pub fn fd_infonce_loss() -> f64 {
    worst(122, |rng| {
        let n = 3usize;
        let dim = 4usize;
        let mut inputs = Vec::new();
        for _ in 0..n + 2 {
            inputs.push(randn_offset_zero(&[dim], rng).requires_grad_(true));
        }
        let q_classes = [rng.below(n), rng.below(n)];
        (
            inputs,
            Box::new(move |xs| {
                let set = EmbeddingSet {
                    prototypes: (0..n).map(|c| (c, xs[c].clone())).collect(),
                    queries: vec![
                        (q_classes[0], xs[n].clone()),
                        (q_classes[1], xs[n + 1].clone()),
                    ],
                };
                losses::infonce_loss(&set, 0.5).unwrap()
            }),
        )
    })
}

pub fn fd_refine_attention_pool() -> f64 {
    worst(123, |rng| {
        let c = randn(&[1, 2, 2, 2, 2], 1.0, rng).requires_grad_(true);
        let w1 = randn(&[2, 1, 3, 3, 3, 3], 0.3, rng).requires_grad_(true);
        let w2 = randn(&[1, 2, 3, 3, 3, 3], 0.3, rng).requires_grad_(true);
        let f = randn(&[3, 2, 2], 1.0, rng).requires_grad_(true);
        let r = random_functional(&[3], rng);
        (
            vec![c, w1, w2, f],
            Box::new(move |xs| {
                let refined = xs[0]
                    .conv4d(&xs[1])
                    .unwrap()
                    .relu()
                    .conv4d(&xs[2])
                    .unwrap()
                    .reshape(&[2, 2, 2, 2])
                    .unwrap();
                let (a_q, _a_s) = cfc::attention_maps(&refined, 2.0).unwrap();
                cfc::attended_pool(&xs[3], &a_q).unwrap().mul(&r).unwrap().sum_all()
            }),
        )
    })
}

pub fn fd_sfe_bottleneck() -> f64 {
    worst(124, |rng| {
        let x = randn(&[2, 4, 5, 5], 1.0, rng).requires_grad_(true);
        let w_reduce = randn(&[2, 4, 1, 1], 0.5, rng).requires_grad_(true);
        let w_a = randn(&[2, 2, 3, 3], 0.4, rng).requires_grad_(true);
        let w_b = randn(&[2, 2, 3, 3], 0.4, rng).requires_grad_(true);
        let w_restore = randn(&[4, 2, 1, 1], 0.5, rng).requires_grad_(true);
        let r = random_functional(&[2, 4, 1, 1], rng);
        (
            vec![x, w_reduce, w_a, w_b, w_restore],
            Box::new(move |xs| {
                xs[0]
                    .conv2d(&xs[1], 1, 0)
                    .unwrap()
                    .conv2d(&xs[2], 1, 0)
                    .unwrap()
                    .conv2d(&xs[3], 1, 0)
                    .unwrap()
                    .conv2d(&xs[4], 1, 0)
                    .unwrap()
                    .mul(&r)
                    .unwrap()
                    .sum_all()
            }),
        )
    })
}

/// Every runner, by operation name.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("elementwise add/mul/sub", fd_elementwise()),
        ("exp/log/powf", fd_exp_log_powf()),
        ("matmul", fd_matmul()),
        ("sum/mean/reshape/permute", fd_reductions_layout()),
        ("channel broadcasts", fd_channel_broadcasts()),
        ("conv2d", fd_conv2d()),
        ("conv4d", fd_conv4d()),
        ("unfold", fd_unfold()),
        ("softmax", fd_softmax()),
        ("normalize/cosine", fd_normalize_cosine()),
        ("cross-entropy", fd_cross_entropy()),
        ("batchnorm (train)", fd_batchnorm_train()),
        ("batchnorm (eval)", fd_batchnorm_eval()),
        ("attention maps", fd_attention_maps()),
        ("attended pooling", fd_attended_pool()),
        ("cross-correlation", fd_cross_correlation()),
        ("self-correlation", fd_self_correlation()),
        ("tet loss", fd_tet_loss()),
        ("infonce loss", fd_infonce_loss()),
        ("4D refine + attention + pool", fd_refine_attention_pool()),
        ("sfe bottleneck block", fd_sfe_bottleneck()),
    ]
}
