//! SFT conditioning, guidance and CFW identities.

mod common;

use common::{concat, conv, rand_tensor, randomize, silu_map, Map};
use tdsr::aggregation::GuidedPredictor;
use tdsr::autoencoder::{
    ae_encode, decode_injections, init_autoencoder, init_cfw, AutoencoderConfig, CfwCoefficient,
};
use tdsr::diffusion::{make_schedule, GuidanceConfig, NoisePredictor};
use tdsr::encoder::{finetune_encoder, init_encoder, sft_modulate, ConditionedModel, EncoderConfig, LatentPair};
use tdsr::image::Image;
use tdsr::params::AdamConfig;
use tdsr::prior::{init_prior, PriorConfig, NEGATIVE_CONDITION, NULL_CONDITION};
use tdsr::train::TrainConfig;
use tdsr::LatentGrid;

fn tiny_prior() -> PriorConfig {
    PriorConfig {
        latent_channels: 2,
        widths: [4, 6],
        blocks_per_scale: 1,
        time_dim: 8,
        embed_dim: 6,
        num_conditions: 2,
    }
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        widths: [3, 4],
        time_dim: 8,
        embed_dim: 4,
        time_aware: true,
    }
}

fn grid(seed: u64) -> LatentGrid {
    LatentGrid::from_tensor(rand_tensor(&[2, 4, 4], 1.0, seed)).unwrap()
}

#[test]
fn guidance_identities_and_affinity() {
    let pc = tiny_prior();
    let ec = tiny_encoder();
    let mut p = init_prior(&pc, 1).unwrap();
    let mut e = init_encoder(&ec, &pc, 2).unwrap();
    randomize(&mut p, 0.3, 3);
    randomize(&mut e, 0.3, 4);
    let model = ConditionedModel {
        prior: &p,
        prior_cfg: &pc,
        enc: &e,
        enc_cfg: &ec,
    };
    let (z, lr) = (grid(5), grid(6));
    let guided = |s: f64| GuidedPredictor {
        model,
        guidance: GuidanceConfig::new(s, NEGATIVE_CONDITION, NULL_CONDITION).unwrap(),
    };
    let null = model.forward_with_condition(&z, &lr, 40, NULL_CONDITION).unwrap();
    let cond = model.forward_with_condition(&z, &lr, 40, NEGATIVE_CONDITION).unwrap();
    assert!(guided(1.0).predict(&z, Some(&lr), 40).unwrap().bit_eq(&null));
    assert!(guided(0.0).predict(&z, Some(&lr), 40).unwrap().bit_eq(&cond));
    for s in [0.3, 1.5, 2.75, 7.0] {
        let out = guided(s).predict(&z, Some(&lr), 40).unwrap();
        for i in 0..out.data().len() {
            let want = (1.0 - s) * cond.data()[i] + s * null.data()[i];
            assert!((out.data()[i] - want).abs() < 1e-12);
        }
    }
    assert!(GuidanceConfig::new(-0.1, 1, 0).is_err());
    assert!(GuidanceConfig::new(f64::NAN, 1, 0).is_err());
}

#[test]
fn sft_modulation_formula() {
    let f = rand_tensor(&[2, 3, 3], 1.0, 1);
    let a = rand_tensor(&[2, 3, 3], 1.0, 2);
    let b = rand_tensor(&[2, 3, 3], 1.0, 3);
    let out = sft_modulate(&f, &a, &b).unwrap();
    for i in 0..18 {
        assert_eq!(out.data()[i], (1.0 + a.data()[i]) * f.data()[i] + b.data()[i]);
    }
    let zero = tdsr::Tensor::zeros(&[2, 3, 3]);
    assert!(sft_modulate(&f, &zero, &zero).unwrap().bit_eq(&f));
    assert!(sft_modulate(&f, &rand_tensor(&[2, 3, 2], 1.0, 4), &zero).is_err());
}

#[test]
fn frozen_prior_survives_finetuning() {
    let pc = tiny_prior();
    let ec = tiny_encoder();
    let mut p = init_prior(&pc, 1).unwrap();
    randomize(&mut p, 0.3, 7);
    let before = p.digest("prior.");
    let mut e = init_encoder(&ec, &pc, 2).unwrap();
    let enc_before = e.digest("enc.");
    let pairs: Vec<LatentPair> = (0..4).map(|i| LatentPair { lr: grid(10 + i), hr: grid(20 + i) }).collect();
    let s = make_schedule(100, 1e-3, 0.05).unwrap();
    let tc = TrainConfig {
        steps: 1000,
        batch_size: 2,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        seed: 1,
        final_lr_factor: 1.0,
    };
    finetune_encoder(&p, &pc, &mut e, &ec, &pairs, &s, &tc).unwrap();
    assert_eq!(p.digest("prior."), before);
    assert_ne!(e.digest("enc."), enc_before);
}

#[test]
fn cfw_injection_is_affine_in_w() {
    let cfg = AutoencoderConfig {
        latent_channels: 2,
        widths: [3, 4],
    };
    let mut ae = init_autoencoder(&cfg, 1).unwrap();
    let mut cfw = init_cfw(&cfg, 2).unwrap();
    randomize(&mut ae, 0.2, 3);
    randomize(&mut cfw, 0.2, 4);
    let img = Image::from_planar(8, 8, rand_tensor(&[192], 0.5, 5).data().iter().map(|v| v + 0.5).collect())
        .unwrap();
    let (_, feats) = ae_encode(&ae, &img).unwrap();
    let z = LatentGrid::from_tensor(rand_tensor(&[2, 2, 2], 1.0, 6)).unwrap();
    let at = |w: f64| decode_injections(&ae, &cfw, &z, &feats, CfwCoefficient::new(w)).unwrap();
    let (m0, mh, m1) = (at(0.0), at(0.5), at(1.0));
    assert_eq!(mh.iter().map(|t| t.0).collect::<Vec<_>>(), vec![1, 0]);
    // The first injection sees a decoder feature that does not depend on w.
    assert!(mh[0].1.bit_eq(&m0[0].1) && mh[0].1.bit_eq(&m1[0].1));
    assert!(m0[0].1.bit_eq(&m0[0].2));
    for i in 0..mh[0].2.len() {
        let mid = 0.5 * (m0[0].2.data()[i] + m1[0].2.data()[i]);
        assert!((mh[0].2.data()[i] - mid).abs() < 1e-12);
    }
    // At every injection F_m = F_d + w * C(F_e, F_d).
    for w in [0.25, 0.5, 1.0] {
        for (scale, fd, fm) in at(w) {
            let fe = Map::from_tensor(&feats.0[scale]);
            let fdm = Map::from_tensor(&fd);
            let h = silu_map(&conv(&cfw, &format!("cfw.c{scale}.conv1"), &concat(&fe, &fdm)));
            let delta = conv(&cfw, &format!("cfw.c{scale}.conv2"), &h);
            assert!(delta.v.iter().any(|v| v.abs() > 1e-6));
            for i in 0..delta.v.len() {
                assert!((fm.data()[i] - (fd.data()[i] + w * delta.v[i])).abs() < 1e-12);
            }
        }
    }
}
