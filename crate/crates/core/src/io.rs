//! CSV exchange of nodal fields: one row per active node, chart parameters
//! `p0..p{n-1}` followed by `value`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{DiscreteField, Mesh};
use crate::stencil::locate_node;

/// Float format used in every CSV this crate writes (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_field_csv<W: Write>(mesh: &Mesh, field: &DiscreteField, out: W) -> Result<()> {
    mesh.check_field(field)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..mesh.dim()).map(|a| format!("p{a}")).collect();
    header.push("value".into());
    w.write_record(&header)?;
    for i in mesh.active_nodes() {
        let mut row: Vec<String> = mesh.param(i).into_iter().map(fmt_f64).collect();
        row.push(fmt_f64(field.values[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a field written by [`write_field_csv`]. Every active node must
/// appear exactly once; rows must sit on grid nodes.
pub fn read_field_csv<R: Read>(mesh: &Mesh, input: R) -> Result<DiscreteField> {
    let mut r = csv::Reader::from_reader(input);
    let cols = r.headers()?.len();
    if cols != mesh.dim() + 1 {
        return Err(Error::MismatchedInputs(format!("expected {} columns, found {cols}", mesh.dim() + 1)));
    }
    let mut values = vec![0.0; mesh.len()];
    let mut seen = vec![false; mesh.len()];
    for rec in r.records() {
        let rec = rec?;
        let nums = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::MismatchedInputs(format!("bad number in row {:?}: {e}", rec.position())))?;
        let node = locate_node(mesh, &nums[..mesh.dim()])?;
        if seen[node] {
            return Err(Error::MismatchedInputs(format!("node {:?} listed twice", mesh.param(node))));
        }
        seen[node] = true;
        values[node] = nums[mesh.dim()];
    }
    if let Some(missing) = mesh.active_nodes().find(|&i| !seen[i]) {
        return Err(Error::MismatchedInputs(format!("no row for node {:?}", mesh.param(missing))));
    }
    Ok(DiscreteField::on(mesh, values))
}
