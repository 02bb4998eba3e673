//! Mixes the top heads' attention toward the gold span at increasing
//! intensity and prints the sweep table.

use tcas_lab::experiment::{run, Cell, ExperimentKind, RunConfig};

fn main() -> tcas_lab::Result<()> {
    let cfg = RunConfig::from_toml(
        r#"
[schedule]
steps = 400
[synth]
eval_size = 100
"#,
    )?;
    let out = run(ExperimentKind::Intervene, &cfg)?;
    let sweep = out.report.table("sweep").expect("sweep table");
    println!("{}", sweep.columns.join("\t"));
    for row in &sweep.rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Num(x) => format!("{x:.3}"),
                Cell::Int(i) => i.to_string(),
                Cell::Text(s) => s.clone(),
            })
            .collect();
        println!("{}", cells.join("\t"));
    }
    for c in &out.report.checks {
        println!("{} {}", if c.passed { "ok  " } else { "FAIL" }, c.name);
    }
    Ok(())
}
