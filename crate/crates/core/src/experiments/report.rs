use crate::error::{Error, Result};

const REQUIRED: [&str; 9] =
    ["system", "method", "particles", "sigma_o", "runs", "failures", "err_a_mean", "err_a_std", "err_u_mean"];

fn percent(mean: &str, std: &str) -> Result<String> {
    if mean.is_empty() || mean == "NaN" {
        return Ok("n/a".into());
    }
    let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
    Ok(format!("{:.2} ± {:.2}", 100.0 * parse(mean)?, 100.0 * parse(std)?))
}

/// Markdown table of an aggregate CSV, errors shown in percent as mean ± std.
pub fn markdown_report(csv: &str) -> Result<String> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty aggregate table".into()))?.split(',').collect();
    let col = |name: &str| -> Result<usize> {
        header.iter().position(|h| *h == name).ok_or_else(|| Error::Format(format!("missing column {name}")))
    };
    let idx: Vec<usize> = REQUIRED.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let u_std = col("err_u_std")?;
    let mut out = String::from(
        "| System | Method | N | σ_O | Runs | Failed | Rel. Error (a) % | Rel. Error (u) % |\n|---|---|---|---|---|---|---|---|\n",
    );
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Format(format!("row has {} fields, header has {}", cells.len(), header.len())));
        }
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            cells[idx[0]],
            cells[idx[1]],
            cells[idx[2]],
            cells[idx[3]],
            cells[idx[4]],
            cells[idx[5]],
            percent(cells[idx[6]], cells[idx[7]])?,
            percent(cells[idx[8]], cells[u_std])?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_rows_in_percent() {
        let csv = "system,method,particles,sigma_o,runs,failures,err_a_mean,err_a_std,err_u_mean,err_u_std,err_mean,err_std\n\
                   poisson,nog,1,0,20,0,0.5,0.01,0.25,0.125,0.375,0.1\n\
                   poisson,sosag,1,0,1,1,NaN,NaN,NaN,NaN,NaN,NaN\n";
        let md = markdown_report(csv).unwrap();
        let rows: Vec<&str> = md.lines().collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[2], "| poisson | nog | 1 | 0 | 20 | 0 | 50.00 ± 1.00 | 25.00 ± 12.50 |");
        assert!(rows[3].ends_with("| n/a | n/a |"));
    }

    #[test]
    fn malformed_tables_rejected() {
        assert!(markdown_report("").is_err());
        assert!(markdown_report("system,method\npoisson,nog\n").is_err());
        let bad = "system,method,particles,sigma_o,runs,failures,err_a_mean,err_a_std,err_u_mean,err_u_std\n\
                   poisson,nog,1,0,1,0,x,0,0,0\n";
        assert!(markdown_report(bad).is_err());
    }
}
