//! Output writers: step-log CSV, study CSV/JSON, adaptive summary JSON, mesh
//! snapshots, and the run manifest. Floats are serialised with 17 significant
//! digits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use femzz::adaptivity::{AdaptConfig, AdaptiveRun};
use femzz::benchmarks::{eoc, StudyResult};
use femzz::indicators::{EstimatorAccumulator, STEP_LOG_HEADER};

pub struct RunManifest {
    pub command: String,
    pub problem: String,
    pub config_echo: String,
    pub out_dir: String,
    pub setup_seconds: f64,
    pub run_seconds: f64,
    pub write_seconds: f64,
}

pub struct OutputWriter {
    dir: PathBuf,
    files: Vec<String>,
}

fn jnum(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "null".into()
    } else if x > 0.0 {
        "\"inf\"".into()
    } else {
        "\"-inf\"".into()
    }
}

fn jopt(x: Option<f64>) -> String {
    match x {
        Some(v) => jnum(v),
        None => "null".into(),
    }
}

impl OutputWriter {
    pub fn new(dir: &Path) -> OutputWriter {
        OutputWriter { dir: dir.to_path_buf(), files: Vec::new() }
    }

    fn write_file(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        let mut f = fs::File::create(path)?;
        f.write_all(contents.as_bytes())?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Per-level step-log CSVs plus the study summary JSON.
    pub fn write_study(&mut self, study: &StudyResult) -> std::io::Result<()> {
        for (level, log) in study.levels.iter().zip(&study.logs) {
            let mut csv = String::from(STEP_LOG_HEADER);
            csv.push('\n');
            let mut acc = EstimatorAccumulator::new(level.initial_error);
            for row in log {
                acc.push(row);
                csv.push_str(&row.csv_row(&acc));
                csv.push('\n');
            }
            self.write_file(&format!("level_{:02}.csv", level.level), &csv)?;
        }

        // EOC columns against the level mesh sizes (null on the first level)
        let hs: Vec<f64> = study.levels.iter().map(|l| l.h).collect();
        let eoc_of = |get: &dyn Fn(&femzz::benchmarks::LevelResult) -> f64| -> Vec<Option<f64>> {
            let vals: Vec<f64> = study.levels.iter().map(get).collect();
            match eoc(&vals, &hs) {
                Ok(slopes) => std::iter::once(None)
                    .chain(slopes.into_iter().map(Some))
                    .collect(),
                Err(_) => vec![None; study.levels.len()],
            }
        };
        let eoc_e = eoc_of(&|l| l.e_cum);
        let eoc_theta = eoc_of(&|l| l.theta_cum);

        let mut json = String::from("{\n  \"levels\": [\n");
        for (i, l) in study.levels.iter().enumerate() {
            json.push_str(&format!(
                "    {{\"level\": {}, \"h\": {}, \"tau\": {}, \"dim\": {}, \"steps\": {}, \"E\": {}, \"Theta\": {}, \"error\": {}, \"error_final_l2\": {}, \"eta\": {}, \"EOC_E\": {}, \"EOC_Theta\": {}, \"EI\": {}}}{}\n",
                l.level,
                jnum(l.h),
                jnum(l.tau),
                l.dim,
                l.steps,
                jnum(l.e_cum),
                jnum(l.theta_cum),
                jnum(l.error_energy),
                jnum(l.error_final_l2),
                jnum(l.eta),
                jopt(eoc_e[i]),
                jopt(eoc_theta[i]),
                jopt(l.ei),
                if i + 1 < study.levels.len() { "," } else { "" },
            ));
        }
        json.push_str("  ]\n}\n");
        self.write_file("study.json", &json)
    }

    /// Step log CSV, summary JSON and mesh snapshots of an adaptive run.
    pub fn write_adaptive(
        &mut self,
        problem: &str,
        degree: usize,
        config: &AdaptConfig,
        run: &AdaptiveRun,
    ) -> std::io::Result<()> {
        let mut csv = String::from(STEP_LOG_HEADER);
        csv.push('\n');
        let mut acc = EstimatorAccumulator::new(run.acc.initial_error);
        for row in &run.log {
            acc.push(row);
            csv.push_str(&row.csv_row(&acc));
            csv.push('\n');
        }
        self.write_file("steps.csv", &csv)?;

        for (i, snap) in run.snapshots.iter().enumerate() {
            self.write_file(&format!("snapshot_{i:02}.mesh", i = i), &snap.mesh_text)?;
        }

        let snapshots_json: Vec<String> = run
            .snapshots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                format!(
                    "{{\"file\": \"snapshot_{i:02}.mesh\", \"t\": {}, \"n\": {}, \"dim\": {}}}",
                    jnum(s.t),
                    s.n,
                    s.dim
                )
            })
            .collect();
        let json = format!(
            "{{\n  \"problem\": \"{}\",\n  \"degree\": {},\n  \"tolerances\": {{\"tol_eps\": {}, \"tol_gamma\": {}, \"tol_theta\": {}, \"tol_theta_min\": {}, \"global\": {}}},\n  \"xi\": {},\n  \"k_max\": {},\n  \"total_dof\": {},\n  \"steps\": {},\n  \"redo_count\": {},\n  \"kmax_hits\": {},\n  \"final_dim\": {},\n  \"eta_final\": {},\n  \"eta_alt_final\": {},\n  \"error_final\": {},\n  \"error_final_l2\": {},\n  \"ei_final\": {},\n  \"snapshots\": [{}]\n}}\n",
            problem,
            degree,
            jnum(config.tol_eps),
            jnum(config.tol_gamma),
            jnum(config.tol_theta),
            jnum(config.tol_theta_min),
            jnum(config.global_tolerance()),
            jnum(config.xi),
            config.k_max,
            run.total_dof,
            run.steps,
            run.redo_count,
            run.kmax_hits,
            run.final_dim,
            jnum(run.acc.eta()),
            jnum(run.acc.eta_alt()),
            jopt(run.error_energy),
            jopt(run.error_final_l2),
            jopt(run.ei_final),
            snapshots_json.join(", "),
        );
        self.write_file("summary.json", &json)
    }

    /// Write the manifest last so it can attest every emitted file.
    pub fn finish(mut self, manifest: RunManifest) -> std::io::Result<()> {
        let files: Vec<String> = self.files.iter().map(|f| format!("\"{f}\"")).collect();
        let json = format!(
            "{{\n  \"command\": \"{}\",\n  \"problem\": \"{}\",\n  \"out_dir\": \"{}\",\n  \"files\": [{}],\n  \"phases\": {{\"setup_s\": {}, \"run_s\": {}, \"write_s\": {}}},\n  \"config\": {}\n}}\n",
            manifest.command,
            manifest.problem,
            manifest.out_dir.replace('\\', "/"),
            files.join(", "),
            jnum(manifest.setup_seconds),
            jnum(manifest.run_seconds),
            jnum(manifest.write_seconds),
            serde_json::to_string(&manifest.config_echo).unwrap_or_else(|_| "\"\"".into()),
        );
        self.write_file("manifest.json", &json)
    }
}
