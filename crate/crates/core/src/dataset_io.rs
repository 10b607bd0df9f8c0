//! Dataset CSV: `id,f0..f{dim-1},label,truth,origin`, label `-1` for unlabeled.
//! Reals are written with 17 significant digits, so a round trip is lossless.

use std::path::Path;

use crate::bench::{Dataset, Origin, Sample, Truth, TruthManifest};
use crate::error::{Error, Result};

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..dataset.dim).map(|i| format!("f{i}")));
    header.extend(["label", "truth", "origin"].map(String::from));
    w.write_record(&header)?;
    for s in &dataset.samples {
        if s.features.len() != dataset.dim {
            return Err(Error::invalid(
                "write_dataset",
                format!(
                    "sample {} has {} features, expected {}",
                    s.id,
                    s.features.len(),
                    dataset.dim
                ),
            ));
        }
        let truth = dataset.truth.get(s.id).ok_or_else(|| {
            Error::invalid(
                "write_dataset",
                format!("sample {} has no truth entry", s.id),
            )
        })?;
        let mut rec = vec![s.id.to_string()];
        rec.extend(s.features.iter().map(|&v| fmt_real(v)));
        rec.push(s.label.map_or("-1".to_string(), |l| l.to_string()));
        rec.push(truth.class.to_string());
        rec.push(match truth.origin {
            Origin::In => "in".into(),
            Origin::Out => "out".into(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = r.headers()?.clone();
    let malformed = |line: u64, msg: String| Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let n = header.len();
    if n < 4
        || &header[0] != "id"
        || &header[n - 3] != "label"
        || &header[n - 2] != "truth"
        || &header[n - 1] != "origin"
    {
        return Err(malformed(
            1,
            "expected header id,f0..,label,truth,origin".into(),
        ));
    }
    let dim = n - 4;
    for (i, name) in header.iter().skip(1).take(dim).enumerate() {
        if name != format!("f{i}") {
            return Err(malformed(1, format!("unexpected column `{name}`")));
        }
    }

    let mut samples = Vec::new();
    let mut truth = TruthManifest::default();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n {
            return Err(malformed(
                line,
                format!("expected {n} fields, got {}", rec.len()),
            ));
        }
        let id: u64 = rec[0]
            .parse()
            .map_err(|e| malformed(line, format!("id: {e}")))?;
        let features = (1..=dim)
            .map(|i| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| malformed(line, format!("f{}: {e}", i - 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let label: i64 = rec[n - 3]
            .parse()
            .map_err(|e| malformed(line, format!("label: {e}")))?;
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => {
                return Err(malformed(
                    line,
                    format!("label {l} is neither -1 nor a class"),
                ))
            }
        };
        let class: usize = rec[n - 2]
            .parse()
            .map_err(|e| malformed(line, format!("truth: {e}")))?;
        let origin = match &rec[n - 1] {
            "in" => Origin::In,
            "out" => Origin::Out,
            other => return Err(malformed(line, format!("origin `{other}`"))),
        };
        truth.insert(id, Truth { class, origin });
        samples.push(Sample {
            id,
            features,
            label,
        });
    }
    Ok(Dataset {
        dim,
        samples,
        truth,
    })
}
