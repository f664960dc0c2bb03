//! Finite-difference checks runnable from the command line.

use anyhow::Result;
use clap::ValueEnum;
use lts_core::didl::{DidlArch, DidlModel};
use lts_core::distlayer::{
    product_backward_kernel, product_forward, sum_backward_kernel, sum_forward, DensityVector,
    DistributionKernel,
};
use lts_core::hist::{INSTANCE_LEN, NUM_BINS};
use lts_core::nn::gradcheck::{gradcheck, GradcheckOptions};
use lts_core::nn::{
    conv2d_backward, conv2d_forward, nll_loss, weighted_cross_entropy, Conv2dSpec, Parameter,
    Parameterized, Tensor,
};
use lts_core::sbr::{RefineNet, CLASS_WEIGHTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Distlayer,
    Nn,
    Didl,
    Sbr,
}

pub struct CheckResult {
    pub name: &'static str,
    pub entries: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

struct Kernel(DistributionKernel<f64>);

impl Parameterized<f64> for Kernel {
    fn parameters(&self) -> Vec<&Parameter<f64>> {
        vec![&self.0.param]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.0.param]
    }
}

struct Conv {
    weight: Parameter<f64>,
    bias: Parameter<f64>,
}

impl Parameterized<f64> for Conv {
    fn parameters(&self) -> Vec<&Parameter<f64>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn density(rng: &mut ChaCha8Rng) -> DensityVector<f64> {
    DensityVector::new((0..NUM_BINS).map(|_| rng.random_range(0.0..1.0)).collect()).expect("finite")
}

fn dot(a: &DensityVector<f64>, b: &DensityVector<f64>) -> f64 {
    a.density.iter().zip(&b.density).map(|(x, y)| x * y).sum()
}

fn kernel_check(rng: &mut ChaCha8Rng, product: bool) -> CheckResult {
    let x = density(rng);
    let g = DensityVector::new((0..NUM_BINS).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite");
    let mut k = Kernel(DistributionKernel::from_density("k", &density(rng)));
    let forward = |k: &Kernel| {
        let z = if product { product_forward(&x, &k.0) } else { sum_forward(&x, &k.0) };
        dot(&z.expect("finite output"), &g)
    };
    let report = gradcheck(
        &mut k,
        |k: &mut Kernel| {
            let grad = if product {
                product_backward_kernel(&x, &g)
            } else {
                sum_backward_kernel(&x, &g)
            };
            k.0.param.grad.data_mut().copy_from_slice(&grad);
            forward(k)
        },
        |k: &Kernel| forward(k),
        GradcheckOptions { max_entries: 202, ..Default::default() },
    );
    CheckResult {
        name: if product { "product kernel" } else { "sum kernel" },
        entries: report.entries.len(),
        max_error: report.max_relative_error(),
        tolerance: 1e-5,
    }
}

fn conv_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = Tensor::<f64>::from_fn(&[2, 3, 6, 6], |_| rng.random_range(-1.0..1.0));
    let g = Tensor::<f64>::from_fn(&[2, 4, 6, 6], |_| rng.random_range(-1.0..1.0));
    let mut m = Conv {
        weight: Parameter::new("w", Tensor::from_fn(&[4, 3, 3, 3], |_| rng.random_range(-1.0..1.0))),
        bias: Parameter::new("b", Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0))),
    };
    let spec = Conv2dSpec::same(3);
    let loss = |m: &Conv| {
        let y = conv2d_forward(&x, &m.weight.value, Some(&m.bias.value), spec).expect("shapes");
        y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let report = gradcheck(
        &mut m,
        |m: &mut Conv| {
            let gr = conv2d_backward(&x, &m.weight.value, &g, spec).expect("shapes");
            m.weight.grad = gr.weight;
            m.bias.grad = gr.bias;
            loss(m)
        },
        |m: &Conv| loss(m),
        GradcheckOptions::default(),
    );
    Ok(CheckResult {
        name: "conv2d 3x3",
        entries: report.entries.len(),
        max_error: report.max_relative_error(),
        tolerance: 1e-5,
    })
}

fn didl_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let batch: Vec<Vec<f32>> = (0..5)
        .map(|_| {
            let mut m = vec![0f32; INSTANCE_LEN];
            for c in 0..3 {
                for _ in 0..10 {
                    m[c * NUM_BINS + rng.random_range(100..140)] += 0.1;
                }
            }
            m
        })
        .collect();
    let refs: Vec<&[f32]> = batch.iter().map(Vec::as_slice).collect();
    let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let mut model = DidlModel::<f64>::build(DidlArch::tiny(), rng.random());
    let report = gradcheck(
        &mut model,
        |m: &mut DidlModel<f64>| m.loss_and_backward(&refs, &targets).expect("valid batch"),
        |m: &DidlModel<f64>| nll_loss(&m.forward(&refs).expect("valid batch"), &targets).expect("targets"),
        GradcheckOptions { max_entries: 40, ..Default::default() },
    );
    Ok(CheckResult {
        name: "didl tiny end-to-end",
        entries: report.entries.len(),
        max_error: report.max_relative_error(),
        tolerance: 1e-4,
    })
}

fn sbr_check(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let x = Tensor::<f64>::from_fn(&[2, 4, 8, 8], |_| rng.random_range(0.0..1.0));
    let targets: Vec<usize> = (0..128).map(|_| rng.random_range(0..2)).collect();
    let mut net = RefineNet::<f64>::build(2, rng.random());
    for p in net.parameters_mut().into_iter().filter(|p| p.name.ends_with("bias")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let report = gradcheck(
        &mut net,
        |m: &mut RefineNet<f64>| m.loss_and_backward(&x, &targets, CLASS_WEIGHTS).expect("valid patch"),
        |m: &RefineNet<f64>| {
            let logits = m.forward(&x).expect("valid patch");
            weighted_cross_entropy(&logits, &targets, &CLASS_WEIGHTS).expect("weights").0
        },
        GradcheckOptions { max_entries: 48, ..Default::default() },
    );
    Ok(CheckResult {
        name: "sbr tiny end-to-end",
        entries: report.entries.len(),
        max_error: report.max_relative_error(),
        tolerance: 1e-4,
    })
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Distlayer {
        out.push(kernel_check(&mut rng, true));
        out.push(kernel_check(&mut rng, false));
    }
    if all || suite == Suite::Nn {
        out.push(conv_check(&mut rng)?);
    }
    if all || suite == Suite::Didl {
        out.push(didl_check(&mut rng)?);
    }
    if all || suite == Suite::Sbr {
        out.push(sbr_check(&mut rng)?);
    }
    Ok(out)
}
