//! Conversion of a model into the testkit's independent 64-bit network.
//! Shared by test targets through `#[path]`.

use lowrank_core::trainer::{Block, Model, INPUT_SHIFT};
use lowrank_core::Tensor;
use lowrank_testkit::{Layer, Net};

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// The same network as a plain 64-bit shadow.
pub fn shadow(model: &Model) -> Net {
    let layers = model
        .blocks()
        .iter()
        .map(|b| match b {
            Block::Conv(c) => Layer::Conv {
                kernel: f64s(&c.kernel),
                d: c.kernel_size(),
                s: c.in_channels(),
                t: c.out_channels(),
                stride: c.stride,
                pad: c.padding,
            },
            Block::FactorizedConv(f) => {
                let (r3, r4) = f.ranks();
                Layer::FactorizedConv {
                    u3: f64s(&f.u3),
                    core: f64s(&f.core),
                    u4: f64s(&f.u4),
                    d: f.kernel_size(),
                    s: f.in_channels(),
                    t: f.out_channels(),
                    r3,
                    r4,
                    stride: f.stride,
                    pad: f.padding,
                }
            }
            Block::Fc(l) => Layer::Fc {
                w: f64s(&l.weight),
                m: l.in_features(),
                n: l.out_features(),
            },
            Block::FactorizedFc(f) => Layer::FactorizedFc {
                a: f64s(&f.a),
                b: f64s(&f.b),
                m: f.in_features(),
                r: f.rank(),
                n: f.out_features(),
            },
        })
        .collect();
    let [c, h, w] = model.input_shape();
    Net {
        input: (c, h, w),
        shift: INPUT_SHIFT as f64,
        layers,
    }
}
