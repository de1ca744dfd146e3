//! Writes a simulated panel in the long CSV format and reads it back.

use panel_glmm::cli::{read_panel_csv, write_panel_csv};
use panel_glmm::simulation::{generate_panel, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario::default().with_layout(3, 4)?;
    let panel = generate_panel(&scenario, 0)?;
    let mut buf = Vec::new();
    write_panel_csv(&panel.dataset, &mut buf)?;
    let text = String::from_utf8(buf)?;
    print!("{text}");

    let back = read_panel_csv(text.as_bytes(), scenario.family)?;
    assert_eq!(back.y, panel.dataset.y);
    assert_eq!(back.x, panel.dataset.x);
    println!("read back {} rows x {} covariates", back.y.len(), back.x.ncols());

    // drop the (id=1, time=2) row
    let broken: String = text.lines().filter(|l| !l.starts_with("1,2,")).map(|l| format!("{l}\n")).collect();
    match read_panel_csv(broken.as_bytes(), scenario.family) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected edited file: {e}"),
    }
    Ok(())
}
