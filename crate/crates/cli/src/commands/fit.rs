use std::path::{Path, PathBuf};

use laser_core::analysis::power_law_fit;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::plot::{Plot, Series, Style};
use crate::report::{emit_json, versioned, write_text};

#[derive(Debug, Clone)]
pub struct FitArgs {
    pub points: PathBuf,
    pub svg: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Reads `params,loss` rows. A first row that does not parse as numbers is
/// taken as a header.
pub fn read_points(path: &Path) -> CliResult<Vec<(f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CliError::data(format!("{}: {e}", path.display())),
            _ => CliError::config(format!("{}: {e}", path.display())),
        })?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        if record.len() != 2 {
            return Err(CliError::config(format!("{}: row {} has {} fields, expected 2", path.display(), i + 1, record.len())));
        }
        let parsed = (record[0].parse::<f64>(), record[1].parse::<f64>());
        match parsed {
            (Ok(n), Ok(l)) => points.push((n, l)),
            _ if i == 0 => continue,
            _ => return Err(CliError::config(format!("{}: row {} is not numeric", path.display(), i + 1))),
        }
    }
    Ok(points)
}

pub fn run(args: &FitArgs) -> CliResult<Value> {
    let points = read_points(&args.points)?;
    let fit = power_law_fit(&points).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(svg) = &args.svg {
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
        let curve = (0..=50)
            .map(|i| {
                let n = lo * (hi / lo).powf(i as f64 / 50.0);
                (n, fit.a * n.powf(fit.b))
            })
            .collect();
        let plot = Plot {
            title: format!("loss = {:.4} n^{:.4}", fit.a, fit.b),
            x_label: "parameters".into(),
            y_label: "loss".into(),
            log_x: true,
            log_y: true,
            series: vec![
                Series { label: "runs".into(), points: points.clone(), style: Style::Points },
                Series { label: "fit".into(), points: curve, style: Style::Line },
            ],
        };
        write_text(svg, &plot.to_svg())?;
    }
    let doc = versioned("power_law_fit", &json!({ "points": points.len(), "fit": fit }));
    emit_json(args.out.as_deref(), &doc)?;
    Ok(doc)
}
