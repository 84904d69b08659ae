//! Seeded generator for a miniature claims-like OMOP database.
//!
//! Persons get demographics, one observation period in 2008-2010, visits, and
//! clinical events drawn from the bundled vocabulary. The same seed and scale
//! always produce the same rows.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rusqlite::{params, Connection};

use super::{Database, InitError, CONCEPTS_TSV};
use crate::schema::SchemaCatalog;

const STATES: &[&str] = &[
    "CA", "TX", "NY", "FL", "PA", "IL", "OH", "GA", "NC", "MI", "NJ", "VA", "WA", "AZ", "MA",
];
const RACES: &[(i64, f64)] = &[(8527, 0.75), (8516, 0.14), (8515, 0.06), (8657, 0.05)];
const VISIT_TYPES: &[(i64, f64)] = &[(9202, 0.70), (9201, 0.20), (9203, 0.10)];
const CLINICAL_TABLES: &[&str] = &[
    "death",
    "observation",
    "measurement",
    "procedure_occurrence",
    "drug_exposure",
    "condition_occurrence",
    "visit_occurrence",
    "observation_period",
    "person",
    "provider",
    "location",
];

/// (concept, low, high, unit)
const MEASUREMENT_RANGES: &[(i64, f64, f64, i64)] = &[
    (3004410, 4.5, 12.0, 8554),
    (3028437, 50.0, 220.0, 8840),
    (3004249, 95.0, 190.0, 8876),
    (3012888, 55.0, 115.0, 8876),
    (3038553, 17.0, 48.0, 9531),
    (3025315, 45.0, 140.0, 9529),
    (3049187, 15.0, 120.0, 8795),
    (3016723, 0.5, 3.0, 8840),
    (3000963, 9.0, 17.0, 8713),
    (3027114, 120.0, 310.0, 8840),
    (3004501, 65.0, 260.0, 8840),
    (3019170, 0.2, 8.0, 8748),
];

struct Vocabulary {
    conditions: Vec<i64>,
    drugs: Vec<i64>,
    procedures: Vec<i64>,
    measurements: Vec<i64>,
    observations: Vec<i64>,
    specialties: Vec<i64>,
}

impl Vocabulary {
    fn bundled() -> Self {
        let mut v = Vocabulary {
            conditions: vec![],
            drugs: vec![],
            procedures: vec![],
            measurements: vec![],
            observations: vec![],
            specialties: vec![],
        };
        for line in CONCEPTS_TSV.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.get(4).copied() != Some("S") {
                continue;
            }
            let id: i64 = f[0].parse().expect("bundled concept id");
            match f[3] {
                "Condition" => v.conditions.push(id),
                "Drug" => v.drugs.push(id),
                "Procedure" => v.procedures.push(id),
                "Measurement" => v.measurements.push(id),
                "Observation" => v.observations.push(id),
                "Provider" => v.specialties.push(id),
                _ => {}
            }
        }
        v
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, table: &[(i64, f64)]) -> i64 {
    let mut x: f64 = rng.gen();
    for &(v, w) in table {
        if x < w {
            return v;
        }
        x -= w;
    }
    table[table.len() - 1].0
}

fn fmt(d: NaiveDate) -> String {
    d.format("%Y-%m-%d").to_string()
}

fn between(rng: &mut ChaCha8Rng, start: NaiveDate, end: NaiveDate) -> NaiveDate {
    let span = (end - start).num_days().max(0);
    start + Duration::days(rng.gen_range(0..=span))
}

struct Person {
    id: i64,
    start: NaiveDate,
    end: NaiveDate,
    visits: Vec<(i64, NaiveDate)>,
}

/// Replaces all clinical rows with a deterministic synthetic population of
/// `scale` persons. Vocabulary tables are left alone.
pub fn generate_synthetic_data(db: &Database, seed: u64, scale: usize) -> Result<BTreeMap<String, usize>, InitError> {
    if scale == 0 {
        return Err(InitError::Connection {
            target: db.target().to_string(),
            message: "scale must be at least 1 person".into(),
        });
    }
    db.with_writer(|conn| -> Result<(), InitError> {
        for t in SchemaCatalog::bundled().table_names() {
            let exists: i64 = conn.query_row(
                "SELECT COUNT(*) FROM sqlite_master WHERE type = 'table' AND name = ?1",
                [t],
                |r| r.get(0),
            )?;
            if exists == 0 {
                return Err(InitError::SchemaMissing(t.to_string()));
            }
        }
        let tx = conn.transaction()?;
        for t in CLINICAL_TABLES {
            tx.execute(&format!("DELETE FROM {t}"), [])?;
        }
        populate(&tx, seed, scale)?;
        tx.commit()?;
        Ok(())
    })?;
    Ok(db.table_counts()?)
}

fn populate(conn: &Connection, seed: u64, scale: usize) -> rusqlite::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::bundled();
    let first = NaiveDate::from_ymd_opt(2008, 1, 1).unwrap();
    let last = NaiveDate::from_ymd_opt(2010, 12, 31).unwrap();

    let n_locations = (scale / 10).max(10);
    let mut ins = conn.prepare("INSERT INTO location (location_id, state, county, zip) VALUES (?1, ?2, ?3, ?4)")?;
    for id in 1..=n_locations as i64 {
        let state = STATES[rng.gen_range(0..STATES.len())];
        let county = format!("County {}", rng.gen_range(1..=40));
        let zip = format!("{:05}", rng.gen_range(10_000..99_999));
        ins.execute(params![id, state, county, zip])?;
    }

    let n_providers = (scale / 20).max(5);
    let mut ins = conn.prepare("INSERT INTO provider (provider_id, specialty_concept_id, care_site_id) VALUES (?1, ?2, ?3)")?;
    for id in 1..=n_providers as i64 {
        let spec = vocab.specialties[rng.gen_range(0..vocab.specialties.len())];
        ins.execute(params![id, spec, rng.gen_range(1..=20)])?;
    }

    // Per-concept prevalences are drawn once so every person shares them.
    let prevalence = |rng: &mut ChaCha8Rng, ids: &[i64], lo: f64, hi: f64| -> Vec<(i64, f64)> {
        ids.iter().map(|&id| (id, rng.gen_range(lo..hi))).collect()
    };
    let cond_p = prevalence(&mut rng, &vocab.conditions, 0.04, 0.24);
    let drug_p = prevalence(&mut rng, &vocab.drugs, 0.03, 0.20);
    let proc_p = prevalence(&mut rng, &vocab.procedures, 0.02, 0.15);
    let meas_p = prevalence(&mut rng, &vocab.measurements, 0.20, 0.60);
    let obs_p = prevalence(&mut rng, &vocab.observations, 0.05, 0.30);

    let mut ins_person = conn.prepare(
        "INSERT INTO person (person_id, gender_concept_id, year_of_birth, month_of_birth, race_concept_id, \
         ethnicity_concept_id, location_id, provider_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
    )?;
    let mut ins_period = conn.prepare(
        "INSERT INTO observation_period (observation_period_id, person_id, observation_period_start_date, \
         observation_period_end_date) VALUES (?1, ?2, ?3, ?4)",
    )?;
    let mut ins_death = conn.prepare("INSERT INTO death (person_id, death_date, cause_concept_id) VALUES (?1, ?2, ?3)")?;
    let mut ins_visit = conn.prepare(
        "INSERT INTO visit_occurrence (visit_occurrence_id, person_id, visit_concept_id, visit_start_date, \
         visit_end_date, provider_id, care_site_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
    )?;
    let mut ins_cond = conn.prepare(
        "INSERT INTO condition_occurrence (condition_occurrence_id, person_id, condition_concept_id, \
         condition_start_date, condition_end_date, visit_occurrence_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
    )?;
    let mut ins_drug = conn.prepare(
        "INSERT INTO drug_exposure (drug_exposure_id, person_id, drug_concept_id, drug_exposure_start_date, \
         drug_exposure_end_date, days_supply, quantity, visit_occurrence_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
    )?;
    let mut ins_proc = conn.prepare(
        "INSERT INTO procedure_occurrence (procedure_occurrence_id, person_id, procedure_concept_id, procedure_date, \
         visit_occurrence_id) VALUES (?1, ?2, ?3, ?4, ?5)",
    )?;
    let mut ins_meas = conn.prepare(
        "INSERT INTO measurement (measurement_id, person_id, measurement_concept_id, measurement_date, \
         value_as_number, unit_concept_id, visit_occurrence_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
    )?;
    let mut ins_obs = conn.prepare(
        "INSERT INTO observation (observation_id, person_id, observation_concept_id, observation_date, \
         value_as_number, visit_occurrence_id) VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
    )?;

    let (mut visit_id, mut cond_id, mut drug_id, mut proc_id, mut meas_id, mut obs_id) = (0i64, 0i64, 0i64, 0i64, 0i64, 0i64);

    for pid in 1..=scale as i64 {
        let gender = if rng.gen_bool(0.5) { 8507 } else { 8532 };
        let yob: i32 = if rng.gen_bool(0.75) {
            rng.gen_range(1920..1945)
        } else {
            rng.gen_range(1945..1995)
        };
        let race = pick_weighted(&mut rng, RACES);
        let ethnicity = if rng.gen_bool(0.08) { 38003563 } else { 38003564 };
        ins_person.execute(params![
            pid,
            gender,
            yob,
            rng.gen_range(1..=12),
            race,
            ethnicity,
            rng.gen_range(1..=n_locations as i64),
            rng.gen_range(1..=n_providers as i64)
        ])?;

        let start = first + Duration::days(rng.gen_range(0..365));
        let mut end = last - Duration::days(rng.gen_range(0..180));
        if rng.gen_bool(0.04) {
            let death = between(&mut rng, start + Duration::days(30), end);
            let cause = vocab.conditions[rng.gen_range(0..vocab.conditions.len())];
            ins_death.execute(params![pid, fmt(death), cause])?;
            end = death;
        }
        ins_period.execute(params![pid, pid, fmt(start), fmt(end)])?;

        let mut person = Person {
            id: pid,
            start,
            end,
            visits: Vec::new(),
        };
        let n_visits = rng.gen_range(1..=12);
        for _ in 0..n_visits {
            visit_id += 1;
            let vtype = pick_weighted(&mut rng, VISIT_TYPES);
            let vstart = between(&mut rng, person.start, person.end);
            let vend = if vtype == 9201 {
                (vstart + Duration::days(rng.gen_range(1..=7))).min(person.end)
            } else {
                vstart
            };
            ins_visit.execute(params![
                visit_id,
                pid,
                vtype,
                fmt(vstart),
                fmt(vend),
                rng.gen_range(1..=n_providers as i64),
                rng.gen_range(1..=20)
            ])?;
            person.visits.push((visit_id, vstart));
        }
        person.visits.sort_by_key(|v| v.1);

        let visit_for = |rng: &mut ChaCha8Rng, p: &Person| -> (Option<i64>, NaiveDate) {
            let (id, d) = p.visits[rng.gen_range(0..p.visits.len())];
            (Some(id), d)
        };

        for &(concept, p) in &cond_p {
            if !rng.gen_bool(p) {
                continue;
            }
            for _ in 0..rng.gen_range(1..=4) {
                cond_id += 1;
                let (vid, date) = visit_for(&mut rng, &person);
                let end = if rng.gen_bool(0.5) {
                    Some(fmt(date + Duration::days(rng.gen_range(0..60))))
                } else {
                    None
                };
                ins_cond.execute(params![cond_id, pid, concept, fmt(date), end, vid])?;
            }
        }
        for &(concept, p) in &drug_p {
            if !rng.gen_bool(p) {
                continue;
            }
            for _ in 0..rng.gen_range(1..=5) {
                drug_id += 1;
                let date = between(&mut rng, person.start, person.end);
                let supply = [30, 60, 90][rng.gen_range(0..3)];
                let quantity = (supply * rng.gen_range(1..=2)) as f64;
                let vid = if rng.gen_bool(0.5) { visit_for(&mut rng, &person).0 } else { None };
                ins_drug.execute(params![
                    drug_id,
                    pid,
                    concept,
                    fmt(date),
                    fmt(date + Duration::days(supply)),
                    supply,
                    quantity,
                    vid
                ])?;
            }
        }
        for &(concept, p) in &proc_p {
            if !rng.gen_bool(p) {
                continue;
            }
            for _ in 0..rng.gen_range(1..=2) {
                proc_id += 1;
                let (vid, date) = visit_for(&mut rng, &person);
                ins_proc.execute(params![proc_id, pid, concept, fmt(date), vid])?;
            }
        }
        for &(concept, p) in &meas_p {
            if !rng.gen_bool(p) {
                continue;
            }
            let (lo, hi, unit) = MEASUREMENT_RANGES
                .iter()
                .find(|m| m.0 == concept)
                .map_or((0.0, 100.0, None), |m| (m.1, m.2, Some(m.3)));
            for _ in 0..rng.gen_range(1..=4) {
                meas_id += 1;
                let (vid, date) = visit_for(&mut rng, &person);
                let value = (rng.gen_range(lo..hi) * 10.0f64).round() / 10.0;
                ins_meas.execute(params![meas_id, pid, concept, fmt(date), value, unit, vid])?;
            }
        }
        for &(concept, p) in &obs_p {
            if !rng.gen_bool(p) {
                continue;
            }
            for _ in 0..rng.gen_range(1..=2) {
                obs_id += 1;
                let (vid, date) = visit_for(&mut rng, &person);
                ins_obs.execute(params![obs_id, person.id, concept, fmt(date), None::<f64>, vid])?;
            }
        }
    }
    Ok(())
}
