use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use sst_core::nn::{backward, LayerConfig, LossKind, Network, Padding};
use sst_core::Tensor;

use crate::{sst_home, CliResult, Failure, SelfcheckArgs, EXIT_ENVIRONMENT};

/// Set to `gradient` to corrupt the analytic gradient of the probe.
pub const FAULT_ENV: &str = "SST_SELFCHECK_FAULT";

const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-4;

pub fn run(args: &SelfcheckArgs) -> CliResult<()> {
    let out = args.out.out.clone().unwrap_or_else(|| sst_home().join("selfcheck"));
    println!("sst {}", env!("CARGO_PKG_VERSION"));
    println!("sst-core {}", sst_core::VERSION);
    println!("platform {}-{}", std::env::consts::OS, std::env::consts::ARCH);

    let checks: [(&str, Box<dyn Fn() -> Result<String, String>>); 3] = [
        ("output-dir", Box::new(|| check_output_dir(&out))),
        ("png-codec", Box::new(check_png)),
        ("gradient-probe", Box::new(check_gradient)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &checks {
        match check() {
            Ok(detail) => println!("{name:<16} ok    {detail}"),
            Err(why) => {
                println!("{name:<16} FAIL  {why}");
                failed.push(*name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_ENVIRONMENT, format!("failed checks: {}", failed.join(", "))))
    }
}

fn check_output_dir(dir: &Path) -> Result<String, String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let probe = dir.join(".sst-write-probe");
    std::fs::write(&probe, b"probe").map_err(|e| format!("cannot write in {}: {e}", dir.display()))?;
    std::fs::remove_file(&probe).map_err(|e| format!("cannot remove {}: {e}", probe.display()))?;
    Ok(dir.display().to_string())
}

fn check_png() -> Result<String, String> {
    let img = RgbImage::from_fn(7, 5, |x, y| image::Rgb([(x * 30) as u8, (y * 50) as u8, 200]));
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png).map_err(|e| e.to_string())?;
    let back = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?
        .to_rgb8();
    if back != img {
        return Err("decoded pixels differ from encoded ones".into());
    }
    Ok(format!("{} byte round trip", bytes.len()))
}

/// Central differences on a small convolution/dense network with a
/// log loss, compared parameter by parameter against backpropagation.
fn check_gradient() -> Result<String, String> {
    let layers = [
        LayerConfig::Convolution {
            filters: 2,
            height: 3,
            width: 3,
            padding: Padding::Valid,
        },
        LayerConfig::Sigmoid,
        LayerConfig::Flatten,
        LayerConfig::Dense { units: 1 },
        LayerConfig::Sigmoid,
    ];
    let loss = LossKind::BinaryLogLoss;
    let mut net = Network::initialize(&[5, 5, 2], &layers, 7).map_err(|e| e.to_string())?;
    let input = Tensor::from_fn(&[5, 5, 2], |i| ((i * 37 % 17) as f64 / 17.0) - 0.4);
    let target = Tensor::full(&[1], 1.0);
    let grads = backward(&net, loss, &input, &target).map_err(|e| e.to_string())?;
    let skew = if std::env::var(FAULT_ENV).is_ok_and(|v| v == "gradient") { 1.01 } else { 1.0 };

    let eval = |net: &Network| -> Result<f64, String> {
        let out = net.forward(&input).map_err(|e| e.to_string())?;
        Ok(loss.value(out.data(), target.data()))
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for li in 0..net.layers().len() {
        let Some(g) = grads.layers[li].clone() else { continue };
        for (which, analytic) in [(0, &g.weights), (1, &g.biases)] {
            for k in 0..analytic.len() {
                let shift = |net: &mut Network, d: f64| {
                    let (w, b) = net.layers_mut()[li].params_mut().expect("parametric layer");
                    let t = if which == 0 { w } else { b };
                    t.data_mut()[k] += d;
                };
                shift(&mut net, FD_STEP);
                let up = eval(&net)?;
                shift(&mut net, -2.0 * FD_STEP);
                let down = eval(&net)?;
                shift(&mut net, FD_STEP);
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic.data()[k] * skew;
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    if worst < FD_REL_TOL {
        Ok(format!("{checked} parameters, max relative error {worst:.2e}"))
    } else {
        Err(format!("max relative error {worst:.2e} over {checked} parameters exceeds {FD_REL_TOL:e}"))
    }
}
