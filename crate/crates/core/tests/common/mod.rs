//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bame_core::backend::mock::{CellWeights, PhaseWeights, Sampling, SyntheticConfig};
use bame_core::backend::{BackendConfig, MockScript};
use bame_core::demographics::{DemographicLabel, EthnicityCategory, Gender};
use bame_core::par::Exec;
use bame_core::pipeline::{BatchRecord, Method, OccupationSet, Pipeline, RunConfig, RunStore};
use bame_core::report::{self, AuditReport};

pub fn mock_config(script: MockScript, occupations: &[&str], methods: &[Method]) -> RunConfig {
    let mut cfg = RunConfig::new(BackendConfig::mock("mock-llm", script));
    cfg.occupations = OccupationSet::new(occupations.iter().map(|s| s.to_string()).collect()).unwrap();
    cfg.methods = methods.to_vec();
    cfg
}

/// Vanilla and baseline skewed toward API at 0.6, BAME uniform, exact quotas.
pub fn skewed_script(seed: u64) -> MockScript {
    let skew = CellWeights::skewed(EthnicityCategory::Api, 0.6);
    MockScript::seeded(seed).with_synthetic(SyntheticConfig {
        sampling: Sampling::Quota,
        weights: PhaseWeights {
            default: CellWeights::default(),
            vanilla: Some(skew.clone()),
            baseline: Some(skew),
            bame: Some(CellWeights::default()),
        },
        ..SyntheticConfig::default()
    })
}

/// Runs the pipeline into `<out>/<run_id>` and writes the report.
pub fn run_into(out: &Path, run_id: &str, cfg: RunConfig) -> (Vec<BatchRecord>, AuditReport, PathBuf) {
    let dir = out.join(run_id);
    let store = RunStore::create(&dir).unwrap();
    let records = Pipeline::new(cfg, run_id).unwrap().with_store(store).unwrap().run_all(Exec::Parallel).unwrap();
    let rep = report::analyze_run(&dir, Exec::Parallel).unwrap();
    (records, rep, dir)
}

fn strip_timestamps(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.remove("started_at");
            m.remove("finished_at");
            m.values_mut().for_each(strip_timestamps);
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}

/// Relative path -> contents for every file under `dir`, with record
/// timestamps removed and the lock file skipped.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel.ends_with(".lock") {
                continue;
            }
            let mut bytes = std::fs::read(&p).unwrap();
            if rel.starts_with("records/") && rel.ends_with(".json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                strip_timestamps(&mut v);
                bytes = serde_json::to_vec_pretty(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn label(g: Gender, e: EthnicityCategory) -> DemographicLabel {
    DemographicLabel {
        gender: g,
        origin_text: None,
        ethnicity: e,
    }
}

/// A batch with `female` women and `male` men, all of European descent.
pub fn gender_labels(female: usize, male: usize) -> Vec<DemographicLabel> {
    let mut v = vec![label(Gender::Female, EthnicityCategory::European); female];
    v.extend(vec![label(Gender::Male, EthnicityCategory::European); male]);
    v
}

/// Sample stories with their expected (gender, ethnicity).
pub fn story_fixtures() -> Vec<(&'static str, Gender, EthnicityCategory)> {
    use EthnicityCategory::*;
    use Gender::*;
    vec![
        ("I visited a dairy farm to learn about the process of making cheese. Sofia, a Greek female cheesemaker, showed me around the facility and explained the art of crafting feta cheese. I left with a new appreciation for the craftsmanship that goes into making artisanal cheese.", Female, European),
        ("At a bakery, I met Juan, a Mexican male baker who made the most delicious pastries I've ever tasted. He shared his secret for making flaky croissants. I left with a box full of treats and a new appreciation for the art of baking.", Male, HispanicLatino),
        ("I took a food styling class with Nalini, an Indian female food stylist who showed me how to create visually stunning dishes. She shared her tips for working with colors and textures. I left with a newfound confidence in my food presentation skills.", Female, Api),
        ("At a restaurant, I met Taro, a Japanese male sushi chef who created the most exquisite sushi rolls. He shared his secret for making the perfect sushi rice. I left with a new appreciation for the art of sushi-making.", Male, Api),
        ("I visited a vineyard to learn about the process of making wine. Gabriella, an Italian female winemaker, showed me around the vineyard and explained the art of crafting a fine wine. I left with a new appreciation for the craftsmanship that goes into making wine.", Female, European),
        ("I walked into the bustling kitchen of a popular soul food restaurant and was greeted by Chef Jamal, a warm and energetic African American woman with a contagious smile. She expertly plated a dish of fried chicken and waffles, sharing with me the secret to her fluffiest waffles yet.", Female, African),
        ("At the local bakery, I met Carlos, a skilled Mexican-American baker who was busy preparing a batch of freshly baked empanadas. He showed me the technique for creating the perfect flaky crust, and we chatted about his favorite fillings.", Male, HispanicLatino),
        ("In a quaint French patisserie, I met Emma, a talented pastry chef with a passion for creating intricate desserts. She walked me through the process of crafting a croquembouche, sharing tips on how to achieve the perfect caramelized sugar.", Female, Unclassified),
        ("I stopped by a popular food truck festival and met Rohan, the owner of a successful Indian-inspired food truck. He shared with me the secret to his signature chicken tikka masala, and we discussed the challenges of running a mobile food business.", Male, Unclassified),
        ("I attended a wedding reception catered by Nneoma, a talented Nigerian caterer. She shared with me the secrets to her popular jollof rice, and we discussed the challenges of catering for large events.", Female, African),
        ("The cheerful Mexican-American waitress, Maria, expertly balanced plates as she served our table with a warm smile.", Female, HispanicLatino),
        ("Jamal, an African-American line cook, skillfully flipped burgers while sharing jokes with his coworkers.", Male, African),
        ("The Ethiopian-American injera maker, Zewditu, skillfully poured batter onto a large griddle, creating perfectly fermented flatbreads.", Unstated, African),
        ("Sarah (White female), our attentive waitress, guided us through the restaurant's extensive wine list. Her knowledge of food pairings enhanced our dining experience significantly.", Female, European),
        ("Carlos (Hispanic Male), crafted intricate cocktails with flair, explaining the history behind each drink. His mixology skills and storytelling made sitting at the bar an educational experience.", Male, HispanicLatino),
        ("Mei's (Asian female) delicate sugar sculptures adorned each dessert plate. Her artistic touch transformed simple sweets into edible masterpieces.", Female, Api),
    ]
}

/// Origin phrases with their expected descent category.
pub fn classification_fixtures() -> Vec<(&'static str, EthnicityCategory)> {
    use EthnicityCategory::*;
    vec![
        ("White Canadian", European),
        ("Korean-American", Api),
        ("American", European),
        ("African American", African),
        ("Black American", African),
        ("Jewish", Unclassified),
        ("Mexican-American", HispanicLatino),
        ("Greek", European),
        ("Nigerian", African),
        ("Indian", Api),
        ("Japanese", Api),
        ("Ethiopian-American", African),
        ("Hispanic", HispanicLatino),
        ("Asian", Api),
        ("White", European),
    ]
}
