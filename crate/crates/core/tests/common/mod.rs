#![allow(dead_code)]

use rfa_core::adapter::{AdapterConfig, RfaModule};
use rfa_core::attacks::AttackSpec;
use rfa_core::backbone::SplitNet;
use rfa_core::datasets::{synth_blobs, Dataset};
use rfa_core::trainer::{train_fb, train_standard, RunRecord, TrainConfig, TrainData, TrainMode};

pub const EPS_8: f64 = 8.0 / 255.0;

pub struct Desk {
    pub train: Dataset,
    pub test: Dataset,
    pub backbone: SplitNet,
}

impl Desk {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            test: &self.test,
        }
    }
}

/// Standard-trained RefNetD on 3-class blobs.
pub fn desk(dim: usize, spread: f64) -> Desk {
    let train = synth_blobs(1, 200, 3, dim, spread).unwrap();
    let test = synth_blobs(2, 100, 3, dim, spread).unwrap();
    let mut backbone = SplitNet::ref_net_d(dim, 3, 7).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Standard,
        attack: AttackSpec::pgd_linf(EPS_8, 10),
        epochs: 20,
        seed: 3,
        ..Default::default()
    };
    train_standard(&mut backbone, &TrainData { train: &train, test: &test }, &cfg).unwrap();
    Desk { train, test, backbone }
}

/// Blobs where PGD breaks the backbone completely but attacked inputs stay
/// separable at the adapter site.
pub fn broken_desk() -> Desk {
    desk(256, 0.01)
}

/// Adapter-only training with input-space PGD-10 examples.
pub fn fb_adapter(desk: &Desk, d: usize, epochs: usize) -> (RfaModule, RunRecord) {
    let mut rfa = RfaModule::new(&desk.backbone, &AdapterConfig { d, ..Default::default() }, 5).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::Fb,
        attack: AttackSpec::pgd_linf(EPS_8, 10),
        d,
        epochs,
        eval_limit: Some(150),
        seed: 4,
        ..Default::default()
    };
    let rec = train_fb(&desk.backbone, &mut rfa, &desk.data(), &cfg).unwrap();
    (rfa, rec)
}
