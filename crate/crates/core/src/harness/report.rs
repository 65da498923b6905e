use std::fmt::Write as _;
use std::path::Path;

use crate::cluster::ClusterState;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalResult;
use crate::pairing::PairStats;

use super::{EpochLog, StageConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct StageRow {
    pub name: String,
    pub eval: EvalResult,
}

impl StageRow {
    pub fn new(name: &str, eval: EvalResult) -> Self {
        Self {
            name: name.to_string(),
            eval,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansSummary {
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub labeled_fixed: bool,
}

impl KMeansSummary {
    pub fn of(st: &ClusterState) -> Self {
        Self {
            iterations: st.history.len(),
            converged: st.converged,
            objective: st.objective(),
            labeled_fixed: st.history.iter().all(|h| h.labeled_fixed),
        }
    }
}

/// Everything a run produced except timings, so equal runs give equal bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub config: StageConfig,
    pub dataset_seed: u64,
    pub num_classes: usize,
    pub rows: Vec<StageRow>,
    pub logs: Vec<EpochLog>,
    /// Pair quality of one epoch right after pretraining.
    pub vote_check: Option<PairStats>,
    pub kmeans: Option<KMeansSummary>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

fn raw(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

const CSV_HEADER: &str = "stage,acc_known,acc_novel,acc_all,nmi_novel,nmi_all,ari_novel,ari_all,auc";

impl RunReport {
    pub fn new(cfg: &StageConfig, ds: &Dataset) -> Self {
        Self {
            config: cfg.clone(),
            dataset_seed: ds.spec.seed,
            num_classes: ds.num_classes(),
            rows: Vec::new(),
            logs: Vec::new(),
            vote_check: None,
            kmeans: None,
        }
    }

    pub fn row(&self, name: &str) -> Option<&EvalResult> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.eval)
    }

    /// Metric table in percent with Known/Novel/All accuracy columns.
    pub fn table(rows: &[StageRow]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>7} {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7}",
            "stage", "ACC-K", "ACC-N", "ACC-A", "NMI-N", "NMI-A", "ARI-N", "ARI-A", "AUC"
        );
        for r in rows {
            let e = &r.eval;
            let _ = writeln!(
                s,
                "{:<12} {:>7} {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7} | {:>7}",
                r.name,
                opt(e.acc_known),
                opt(e.acc_novel),
                opt(Some(e.acc_all)),
                opt(e.nmi_novel),
                opt(Some(e.nmi_all)),
                opt(e.ari_novel),
                opt(Some(e.ari_all)),
                opt(e.auc)
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "run seed {}  dataset seed {}  classes {}\n\n",
            self.config.seed, self.dataset_seed, self.num_classes
        );
        s += &Self::table(&self.rows);
        if let Some(v) = &self.vote_check {
            let _ = write!(
                s,
                "\npairs after pretraining: vote-agreed precision {:.4} ({} pairs), global top-1 precision {:.4} ({} anchors)\n",
                v.vote_precision(),
                v.agreed.iter().sum::<usize>(),
                v.global_precision(),
                v.anchors.iter().sum::<usize>()
            );
        }
        if let Some(k) = &self.kmeans {
            let _ = writeln!(
                s,
                "k-means: {} iterations, converged {}, objective {:.6}, labeled fixed {}",
                k.iterations, k.converged, k.objective, k.labeled_fixed
            );
        }
        s += "\nconfig:\n";
        s += &self.config.to_text();
        s
    }

    /// One CSV row per evaluated stage, full precision.
    pub fn to_csv(&self) -> String {
        Self::rows_to_csv(&self.rows)
    }

    pub fn rows_to_csv(rows: &[StageRow]) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in rows {
            let e = &r.eval;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.name,
                raw(e.acc_known),
                raw(e.acc_novel),
                e.acc_all,
                raw(e.nmi_novel),
                e.nmi_all,
                raw(e.ari_novel),
                e.ari_all,
                raw(e.auc)
            );
        }
        s
    }

    /// Loss curves as whitespace-separated columns, one gnuplot block per stage.
    pub fn curves_dat(&self) -> String {
        let mut s = String::from("# epoch lr loss ce pairing pseudo reg\n");
        let mut current = "";
        for l in &self.logs {
            if l.stage != current {
                let _ = write!(s, "\n\n# {}\n", l.stage);
                current = &l.stage;
            }
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                l.epoch, l.lr, l.loss, l.ce, l.pairing, l.pseudo, l.reg
            );
        }
        s
    }

    /// Per-epoch pair precision and recall for known and novel anchors, plus
    /// the confidence histogram of pseudo-labels.
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from(
            "stage,epoch,known_precision,known_recall,novel_precision,novel_recall,vote_precision,global_precision,lambda_hist\n",
        );
        for l in self.logs.iter().filter(|l| l.pairs.anchors.iter().sum::<usize>() > 0) {
            let (kp, kr) = l.pairs.group(0);
            let (np, nr) = l.pairs.group(1);
            let hist: Vec<String> = l.lambda_hist.iter().map(|h| h.to_string()).collect();
            let _ = writeln!(
                s,
                "{},{},{kp},{kr},{np},{nr},{},{},{}",
                l.stage,
                l.epoch,
                l.pairs.vote_precision(),
                l.pairs.global_precision(),
                hist.join(" ")
            );
        }
        s
    }

    /// Writes `report.txt`, `report.csv`, `curves.dat` and `pairs.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("report.txt", self.to_text()),
            ("report.csv", self.to_csv()),
            ("curves.dat", self.curves_dat()),
            ("pairs.csv", self.pairs_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }

    /// Parses the rows of a `report.csv`; the mapping is not stored there.
    pub fn rows_from_csv(path: &Path, text: &str) -> Result<Vec<StageRow>> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(bad("unexpected header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields, got {}", f.len())));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
                }
            };
            let req = |s: &str| num(s)?.ok_or_else(|| bad("missing value".into()));
            rows.push(StageRow::new(
                f[0],
                EvalResult {
                    acc_known: num(f[1])?,
                    acc_novel: num(f[2])?,
                    acc_all: req(f[3])?,
                    nmi_novel: num(f[4])?,
                    nmi_all: req(f[5])?,
                    ari_novel: num(f[6])?,
                    ari_all: req(f[7])?,
                    auc: num(f[8])?,
                    mapping: Vec::new(),
                },
            ));
        }
        Ok(rows)
    }
}
