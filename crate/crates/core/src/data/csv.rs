//! Plain CSV dataset I/O: header `f0..f{d-1},label`.

use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::nn::{Dataset, Labels};

/// Features are clipped to `[0,1]`. `num_classes` defaults to `max label + 1`.
pub fn read_dataset_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Csv("missing header".into()))??;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let dim = cols.len().saturating_sub(1);
    if dim == 0 || cols[dim] != "label" {
        return Err(Error::Csv(format!(
            "header must end with `label`: {header}"
        )));
    }
    for (i, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Csv(format!(
                "column {i} should be `f{i}`, found `{c}`"
            )));
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Csv(format!(
                "line {}: expected {} fields, got {}",
                ln + 2,
                dim + 1,
                fields.len()
            )));
        }
        for f in &fields[..dim] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Csv(format!("line {}: bad number `{f}`", ln + 2)))?;
            if !v.is_finite() {
                return Err(Error::Csv(format!("line {}: non-finite feature", ln + 2)));
            }
            features.push(v.clamp(0.0, 1.0));
        }
        let y: usize = fields[dim]
            .parse()
            .map_err(|_| Error::Csv(format!("line {}: bad label `{}`", ln + 2, fields[dim])))?;
        labels.push(y);
    }
    let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(features, dim, Labels::Hard(labels), c)
}

/// Writes hard-label data as `f0..,label` and soft-label data as `f0..,p0..`.
pub fn write_dataset_csv<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("f{i}")).collect();
    match data.labels() {
        Labels::Hard(_) => header.push("label".into()),
        Labels::Soft(_) => header.extend((0..data.num_classes()).map(|c| format!("p{c}"))),
    }
    writeln!(w, "{}", header.join(","))?;
    let c = data.num_classes();
    for i in 0..data.len() {
        let mut fields: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        match data.labels() {
            Labels::Hard(y) => fields.push(y[i].to_string()),
            Labels::Soft(y) => fields.extend(y[i * c..(i + 1) * c].iter().map(|v| v.to_string())),
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_clips() {
        let text = "f0,f1,label\n0.5,1.7,1\n-0.2,0.25,0\n";
        let d = read_dataset_csv(text.as_bytes(), None).unwrap();
        assert_eq!(d.features(), &[0.5, 1.0, 0.0, 0.25]);
        assert_eq!(d.hard_labels().unwrap(), &[1, 0]);
        assert_eq!(d.num_classes(), 2);
    }

    #[test]
    fn rejects_bad_header_and_rows() {
        assert!(read_dataset_csv("a,b,label\n1,2,0\n".as_bytes(), None).is_err());
        assert!(read_dataset_csv("f0,label\n0.1,0.2,0\n".as_bytes(), None).is_err());
        assert!(read_dataset_csv("f0,label\nx,0\n".as_bytes(), None).is_err());
    }

    #[test]
    fn hard_label_round_trip() {
        let d = crate::data::make_blobs(3, 2, 4, 0.1, 0).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&d, &mut buf).unwrap();
        assert_eq!(read_dataset_csv(&buf[..], Some(3)).unwrap(), d);
    }
}
