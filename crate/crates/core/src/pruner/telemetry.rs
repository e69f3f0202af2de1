use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resources::Objective;

/// Bumped whenever telemetry columns change.
pub const TELEMETRY_SCHEMA_VERSION: u32 = 1;

/// One record per pruning interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub step: usize,
    pub epoch: usize,
    pub pi: Vec<f64>,
    /// Usage under the PMU calculation driving the run.
    pub pmu_bytes: u64,
    pub size_bytes: u64,
    pub macs: u64,
    pub pmu_precise: u64,
    pub pmu_imprecise: u64,
    /// Unit-weight resource loss `max(0, max_i u_i / b_i - 1)`.
    pub p_res: f64,
    /// Task loss on the gradient probe, when one was taken.
    pub p_tsk: Option<f64>,
    pub active: Option<Objective>,
    /// Percentage of mask entries that changed since the previous record.
    pub churn_pct: f64,
    /// Widths are frozen (budgets met or pruning disabled).
    pub frozen: bool,
}

const FIXED_HEAD: [&str; 3] = ["schema_version", "step", "epoch"];
const FIXED_TAIL: [&str; 10] = [
    "pmu_bytes",
    "size_bytes",
    "macs",
    "pmu_precise",
    "pmu_imprecise",
    "p_res",
    "p_tsk",
    "active",
    "churn_pct",
    "frozen",
];

pub fn telemetry_header(groups: usize) -> String {
    let mut cols: Vec<String> = FIXED_HEAD.iter().map(|s| s.to_string()).collect();
    cols.extend((0..groups).map(|g| format!("pi_{g}")));
    cols.extend(FIXED_TAIL.iter().map(|s| s.to_string()));
    cols.join(",")
}

impl TelemetryRow {
    pub fn to_csv(&self) -> String {
        let mut f: Vec<String> = vec![
            TELEMETRY_SCHEMA_VERSION.to_string(),
            self.step.to_string(),
            self.epoch.to_string(),
        ];
        f.extend(self.pi.iter().map(|p| p.to_string()));
        f.extend([
            self.pmu_bytes.to_string(),
            self.size_bytes.to_string(),
            self.macs.to_string(),
            self.pmu_precise.to_string(),
            self.pmu_imprecise.to_string(),
            self.p_res.to_string(),
            self.p_tsk.map(|v| v.to_string()).unwrap_or_default(),
            self.active.map(|a| a.to_string()).unwrap_or_default(),
            self.churn_pct.to_string(),
            (self.frozen as u8).to_string(),
        ]);
        f.join(",")
    }
}

/// Header plus one line per row, newline-terminated.
pub fn telemetry_csv(groups: usize, rows: &[TelemetryRow]) -> String {
    let mut out = telemetry_header(groups);
    out.push('\n');
    for r in rows {
        out += &r.to_csv();
        out.push('\n');
    }
    out
}

/// Parses text written by [`telemetry_csv`]. Returns the group count and rows.
pub fn parse_telemetry(text: &str) -> Result<(usize, Vec<TelemetryRow>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok((0, Vec::new()));
    };
    let cols: Vec<&str> = header.split(',').collect();
    let groups = cols
        .len()
        .checked_sub(FIXED_HEAD.len() + FIXED_TAIL.len())
        .ok_or_else(|| Error::Data("telemetry header has too few columns".into()))?;
    if header != telemetry_header(groups) {
        return Err(Error::Data(format!(
            "telemetry header does not match schema version {TELEMETRY_SCHEMA_VERSION}"
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |what: &str| Error::Data(format!("telemetry row {}: bad {what}", n + 1));
        if f.len() != cols.len() {
            return Err(bad("column count"));
        }
        if f[0] != TELEMETRY_SCHEMA_VERSION.to_string() {
            return Err(bad("schema_version"));
        }
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        let int = |i: usize, what: &str| f[i].parse::<u64>().map_err(|_| bad(what));
        let t = FIXED_HEAD.len() + groups;
        let active = match f[t + 7] {
            "" => None,
            "pmu" => Some(Objective::Pmu),
            "size" => Some(Objective::Size),
            "macs" => Some(Objective::Macs),
            _ => return Err(bad("active")),
        };
        rows.push(TelemetryRow {
            step: int(1, "step")? as usize,
            epoch: int(2, "epoch")? as usize,
            pi: (0..groups)
                .map(|g| num(3 + g, "pi"))
                .collect::<Result<_>>()?,
            pmu_bytes: int(t, "pmu_bytes")?,
            size_bytes: int(t + 1, "size_bytes")?,
            macs: int(t + 2, "macs")?,
            pmu_precise: int(t + 3, "pmu_precise")?,
            pmu_imprecise: int(t + 4, "pmu_imprecise")?,
            p_res: num(t + 5, "p_res")?,
            p_tsk: if f[t + 6].is_empty() {
                None
            } else {
                Some(num(t + 6, "p_tsk")?)
            },
            active,
            churn_pct: num(t + 8, "churn_pct")?,
            frozen: int(t + 9, "frozen")? != 0,
        });
    }
    Ok((groups, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, frozen: bool) -> TelemetryRow {
        TelemetryRow {
            step,
            epoch: 1,
            pi: vec![0.75, 1.0 / 3.0],
            pmu_bytes: 100,
            size_bytes: 2000,
            macs: 30000,
            pmu_precise: 100,
            pmu_imprecise: 90,
            p_res: 0.125,
            p_tsk: (!frozen).then_some(1.5),
            active: (!frozen).then_some(Objective::Macs),
            churn_pct: 2.5,
            frozen,
        }
    }

    #[test]
    fn header_lists_every_group() {
        assert_eq!(
            telemetry_header(2),
            "schema_version,step,epoch,pi_0,pi_1,pmu_bytes,size_bytes,macs,pmu_precise,\
             pmu_imprecise,p_res,p_tsk,active,churn_pct,frozen"
        );
    }

    #[test]
    fn round_trip() {
        let rows = vec![row(20, false), row(40, true)];
        let text = telemetry_csv(2, &rows);
        assert_eq!(parse_telemetry(&text).unwrap(), (2, rows));
    }

    #[test]
    fn empty_input_has_no_rows() {
        assert_eq!(parse_telemetry("").unwrap(), (0, vec![]));
        assert_eq!(
            parse_telemetry(&telemetry_csv(3, &[])).unwrap(),
            (3, vec![])
        );
    }

    #[test]
    fn foreign_schema_is_rejected() {
        let text = telemetry_csv(2, &[row(20, false)]).replacen("\n1,", "\n2,", 1);
        assert!(parse_telemetry(&text).is_err());
        assert!(parse_telemetry("a,b\n1,2\n").is_err());
    }
}
