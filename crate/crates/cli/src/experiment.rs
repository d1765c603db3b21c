//! `experiment figs`: regenerate the data behind every figure into one directory.

use std::fmt::Write as _;
use std::path::Path;

use clap::ValueEnum;
use specdn::analysis::{extract_mdc, fit_mdc_lorentzian, gaussian_smooth, second_derivative, DerivativeAxis};
use specdn::io::{save_signed, save_spectrum};
use specdn::nn::{save_checkpoint, Network};
use specdn::noise::{make_raw_pair, NoiseConfig};
use specdn::study::{
    blur_study, depth_study, loss_study, summarize_trace, trace_config, trace_study, Budget, Dataset, TraceCase,
};
use specdn::synth::synth_spectrum;
use specdn::train::{denoise_spectrum, train_network, AblationRow};
use specdn::{rng, Error, Result};

use crate::{push_fit_row, FIT_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// CPU-sized budgets (tens of minutes).
    Desk,
    /// Tiny budgets that only exercise the pipeline.
    Smoke,
}

struct Plan {
    main: Budget,
    comparison: Budget,
    seeds: u64,
    depths: Vec<usize>,
    trace_realizations: u64,
}

impl Plan {
    fn new(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self {
                main: Budget::desk(),
                comparison: Budget::comparison(),
                seeds: 3,
                depths: vec![2, 5, 10],
                trace_realizations: 4,
            },
            Scale::Smoke => Self {
                main: Budget::smoke(),
                comparison: Budget::smoke(),
                seeds: 1,
                depths: vec![1, 2],
                trace_realizations: 1,
            },
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("depth,seed_index,val_loss\n");
    for r in rows {
        for (i, l) in r.losses.iter().enumerate() {
            let _ = writeln!(s, "{},{i},{l}", r.depth);
        }
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
}

pub fn run_figs(scale: Scale, dir: &Path, seed: u64, quiet: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let say = |m: String| {
        if !quiet {
            eprintln!("{m}");
        }
    };
    let plan = Plan::new(scale);
    let b = plan.main;

    say(format!(
        "training depth-{} model on {}x{} crops",
        b.depth, b.size, b.size
    ));
    let data = Dataset::generate(&b, NoiseConfig::for_grid(b.size, b.size), seed)?;
    let init = Network::<f32>::init(b.depth, b.width, seed)?;
    let (report, net) = train_network(
        init,
        &data.maps,
        &data.validation,
        &data.noise,
        &b.train_config(seed),
        |e| {
            if !quiet {
                eprintln!(
                    "  epoch {:>3}  train {:.5}  val {:.5}",
                    e.epoch + 1,
                    e.train_loss,
                    e.val_loss
                );
            }
        },
    )?;
    save_checkpoint(&net, dir.join("model.dnw"))?;
    write(dir, "fig8_history.csv", &report.history_csv())?;

    // Panels: low count (LC), LC smoothed, LC denoised, and a high-count
    // reference (HC) drawn at the top of the count range, with curvature maps.
    let per_pixel = (b.size * b.size) as f64 / (300.0 * 300.0);
    let case = TraceCase {
        linewidth: 0.03,
        background: 0.05,
        count: 1.0e4 * per_pixel,
    };
    let clean = synth_spectrum(&trace_config(b.size, &case))?;
    let lc = make_raw_pair(&clean, case.count, &data.noise, &mut rng::stream(seed, &[21]))?.noisy;
    let hc = make_raw_pair(&clean, 3.0e6 * per_pixel, &data.noise, &mut rng::stream(seed, &[22]))?.noisy;
    let lc_nn = denoise_spectrum(&net, &lc)?;
    let lc_sm = gaussian_smooth(&lc, (1.5, 1.5))?;
    let panels = [("lc", &lc), ("lc_sm", &lc_sm), ("lc_nn", &lc_nn), ("hc", &hc)];
    for (name, s) in panels {
        save_spectrum(s, dir.join(format!("fig2_{name}.spx")))?;
        save_signed(
            &second_derivative(s, DerivativeAxis::Momentum, 1.0)?,
            dir.join(format!("fig2_{name}_d2.spx")),
        )?;
    }

    // MDC fits at a few energies on the LC, LC+NN and HC panels.
    let mut fits = format!("panel,{FIT_HEADER}");
    for (name, s) in [("lc", &lc), ("lc_nn", &lc_nn), ("hc", &hc)] {
        for e in [-0.4, -0.3, -0.2, -0.1] {
            let mdc = extract_mdc(s, e)?;
            match fit_mdc_lorentzian(&mdc, None) {
                Ok(f) => push_fit_row(&mut fits, Some(name), mdc.energy, &f),
                Err(err) => say(format!("  {name} MDC at {e}: {err}")),
            }
        }
    }
    write(dir, "fig3_mdc_fits.csv", &fits)?;

    let cases = [
        TraceCase {
            linewidth: 0.02,
            background: 0.05,
            count: case.count,
        },
        case,
    ];
    let outcomes = trace_study(&net, b.size, &cases, plan.trace_realizations, &data.noise, seed)?;
    let mut t = String::from("linewidth,background,count,realization,raw_rms_px,denoised_rms_px\n");
    for o in &outcomes {
        let _ = writeln!(
            t,
            "{},{},{},{},{},{}",
            o.case.linewidth, o.case.background, o.case.count, o.realization, o.raw_rms, o.denoised_rms
        );
    }
    write(dir, "fig3_trace_rms.csv", &t)?;
    let sum = summarize_trace(&outcomes, 2.0);
    say(format!(
        "trace: {}/{} raw traces above 2 px, pooled denoised {:.2} px",
        sum.qualifying, sum.total, sum.pooled_denoised_rms
    ));

    let c = plan.comparison;
    let cdata = Dataset::generate(&c, NoiseConfig::for_grid(c.size, c.size), seed)?;
    say(format!("depth study {:?} x {} seeds", plan.depths, plan.seeds));
    let rows = depth_study(&c, &cdata, &plan.depths, plan.seeds, seed)?;
    write(dir, "fig4b_depth.csv", &ablation_csv(&rows))?;

    say("detector blur study".into());
    let mut s = String::from("seed,trained_with_blur,trained_without_blur\n");
    for r in blur_study(&c, &cdata, plan.seeds, seed)? {
        let _ = writeln!(s, "{},{},{}", r.seed, r.with_blur, r.without_blur);
    }
    write(dir, "fig6b_blur.csv", &s)?;

    say("loss study".into());
    let mut s = String::from("seed,combined_ms_ssim,mse_ms_ssim\n");
    for r in loss_study(&c, &cdata, plan.seeds, seed)? {
        let _ = writeln!(s, "{},{},{}", r.seed, r.combined_ms_ssim, r.mse_ms_ssim);
    }
    write(dir, "fig7_loss.csv", &s)?;
    say(format!("wrote figure data to {}", dir.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_table_has_one_row_per_model() {
        let rows = [
            AblationRow {
                depth: 2,
                losses: vec![0.3, 0.2],
                mean: 0.25,
            },
            AblationRow {
                depth: 5,
                losses: vec![0.1, 0.1],
                mean: 0.1,
            },
        ];
        let t = ablation_csv(&rows);
        assert_eq!(t.lines().count(), 5);
        assert_eq!(t.lines().nth(3), Some("5,0,0.1"));
    }

    #[test]
    fn smoke_plan_is_small() {
        let p = Plan::new(Scale::Smoke);
        assert!(p.main.epochs <= 2 && p.seeds == 1);
        assert_eq!(Plan::new(Scale::Desk).depths, vec![2, 5, 10]);
    }
}
