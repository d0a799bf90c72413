use std::path::PathBuf;

use xms_core::data::generate_sample;
use xms_core::dataset::{write_index, write_sample, CellEntry, DatasetIndex};

use crate::config::GenDataConfig;
use crate::run_record::write_run_record;

pub struct GenSummary {
    pub out_dir: PathBuf,
    pub cells: usize,
    pub samples: usize,
}

pub fn run(cfg: &GenDataConfig) -> anyhow::Result<GenSummary> {
    cfg.scene.validate()?;
    if cfg.samples_per_cell == 0 {
        anyhow::bail!("samples_per_cell must be positive");
    }
    let cells = cfg.grid.cells();
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_run_record(&cfg.out_dir, "gen-data", cfg.base_seed, cfg, None)?;

    let mut index = DatasetIndex { samples: Vec::new(), cells: Vec::new() };
    for (ci, degr) in cells.iter().enumerate() {
        let cell_id = format!("cell{ci:03}");
        let mut entry = CellEntry {
            id: cell_id.clone(),
            degradation: degr.clone(),
            samples: Vec::new(),
        };
        for k in 0..cfg.samples_per_cell {
            let seed = cfg.base_seed + (ci * cfg.samples_per_cell + k) as u64;
            let sample = generate_sample(seed, &cfg.scene, degr)?;
            let dir_name = format!("{cell_id}_s{k:04}");
            write_sample(&cfg.out_dir.join(&dir_name), &sample, &cfg.scene)?;
            entry.samples.push(dir_name.clone());
            index.samples.push(dir_name);
        }
        index.cells.push(entry);
    }
    write_index(&cfg.out_dir, &index)?;
    Ok(GenSummary {
        out_dir: cfg.out_dir.clone(),
        cells: cells.len(),
        samples: index.samples.len(),
    })
}
