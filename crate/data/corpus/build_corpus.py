#!/usr/bin/env python3
"""Writes epi_questions.jsonl, the bundled question/SQL corpus.

Each family below is one epidemiological question shape: a SQL template in
the engine's SQLite dialect plus three phrasings of the question. Every
instantiation of a family becomes one paraphrase group of three records
(the original phrasing and two paraphrases) sharing one SQL template.

Slots in SQL: {C1} {D1} {P1} {M1} {O1} ... become `[domain@mention]`
placeholders; lowercase slots ({c1}, {year}, ...) are substituted verbatim.
Run with --check to compile every template against the schema.
"""

import json
import os
import re
import sqlite3
import sys
import textwrap

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.abspath(os.path.join(HERE, "..", ".."))
SCHEMA = os.path.join(ROOT, "crates", "core", "sql", "omop_subset_v1.sql")

DOMAINS = {"C": "condition", "D": "drug", "P": "procedure", "M": "measurement", "O": "observation"}

STATES = {"CA": "California", "TX": "Texas", "NY": "New York", "FL": "Florida", "PA": "Pennsylvania", "OH": "Ohio"}


def desc(slot):
    return (
        "(SELECT ca.descendant_concept_id FROM concept_ancestor ca "
        "WHERE ca.ancestor_concept_id IN {%s})" % slot
    )


def first_dx(slot, name="first_dx"):
    return textwrap.dedent(
        f"""\
        {name} AS (
            SELECT co.person_id, MIN(co.condition_start_date) AS index_date
            FROM condition_occurrence co
            WHERE co.condition_concept_id IN {desc(slot)}
            GROUP BY co.person_id
        )"""
    )


FAMILIES = []


def family(key, questions, sql, instances):
    FAMILIES.append({"key": key, "questions": questions, "sql": textwrap.dedent(sql).strip(), "instances": instances})


family(
    "dx_count_year",
    [
        "How many patients were diagnosed with {c1} in {year}?",
        "What is the number of patients who received a diagnosis of {c1} during {year}?",
        "Count the patients with a {c1} diagnosis recorded in {year}.",
    ],
    f"""
    SELECT COUNT(DISTINCT co.person_id) AS patient_count
    FROM condition_occurrence co
    WHERE co.condition_concept_id IN {desc('C1')}
      AND co.condition_start_date BETWEEN '{{year}}-01-01' AND '{{year}}-12-31'
    """,
    [
        {"c1": "type 2 diabetes", "year": 2009},
        {"c1": "atrial fibrillation", "year": 2008},
        {"c1": "dysphagia", "year": 2010},
    ],
)

family(
    "dx_by_gender",
    [
        "How many patients with {c1} are there by gender?",
        "Break down the number of {c1} patients by gender.",
        "What is the gender distribution of patients diagnosed with {c1}?",
    ],
    f"""
    SELECT c.concept_name AS gender, COUNT(DISTINCT p.person_id) AS patient_count
    FROM person p
    JOIN condition_occurrence co ON co.person_id = p.person_id
    JOIN concept c ON c.concept_id = p.gender_concept_id
    WHERE co.condition_concept_id IN {desc('C1')}
    GROUP BY c.concept_name
    ORDER BY c.concept_name
    """,
    [
        {"c1": "osteoporosis"},
        {"c1": "heart failure"},
        {"c1": "depression"},
    ],
)

family(
    "drug_after_dx",
    [
        "Among patients diagnosed with {c1}, how many started {d1} within {days} days after their first diagnosis?",
        "How many patients initiated {d1} in the {days} days following their initial {c1} diagnosis?",
        "Count patients who began {d1} no later than {days} days after first being diagnosed with {c1}.",
    ],
    f"""
    WITH {first_dx('C1')}
    SELECT COUNT(DISTINCT f.person_id) AS patient_count
    FROM first_dx f
    JOIN drug_exposure de ON de.person_id = f.person_id
    WHERE de.drug_concept_id IN {desc('D1')}
      AND de.drug_exposure_start_date >= f.index_date
      AND julianday(de.drug_exposure_start_date) - julianday(f.index_date) <= {{days}}
    """,
    [
        {"c1": "type 2 diabetes", "d1": "metformin", "days": 90},
        {"c1": "atrial fibrillation", "d1": "warfarin", "days": 30},
        {"c1": "hypertension", "d1": "lisinopril", "days": 180},
    ],
)

family(
    "mean_age_first_dx",
    [
        "What is the average age at first diagnosis of {c1}?",
        "On average, how old are patients when they are first diagnosed with {c1}?",
        "Compute the mean age of patients at their earliest {c1} diagnosis.",
    ],
    f"""
    WITH {first_dx('C1')}
    SELECT ROUND(AVG(
        CAST(strftime('%Y', f.index_date) AS INTEGER) - p.year_of_birth
        - CASE WHEN CAST(strftime('%m', f.index_date) AS INTEGER) < COALESCE(p.month_of_birth, 1) THEN 1 ELSE 0 END
    ), 1) AS mean_age
    FROM first_dx f
    JOIN person p ON p.person_id = f.person_id
    """,
    [
        {"c1": "Parkinson's disease"},
        {"c1": "rheumatoid arthritis"},
        {"c1": "breast cancer"},
    ],
)

family(
    "race_distribution",
    [
        "What is the race distribution of patients with {c1}?",
        "Show the percentage of {c1} patients in each race category.",
        "How are patients diagnosed with {c1} distributed across races, in percent?",
    ],
    f"""
    WITH cohort AS (
        SELECT DISTINCT co.person_id
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C1')}
    )
    SELECT c.concept_name AS race,
           COUNT(*) AS patient_count,
           ROUND(100.0 * COUNT(*) / (SELECT COUNT(*) FROM cohort), 1) AS percentage
    FROM cohort ch
    JOIN person p ON p.person_id = ch.person_id
    JOIN concept c ON c.concept_id = p.race_concept_id
    GROUP BY c.concept_name
    ORDER BY patient_count DESC, race
    """,
    [
        {"c1": "hypertension"},
        {"c1": "prostate cancer"},
        {"c1": "sleep apnea"},
    ],
)

family(
    "top_states",
    [
        "Which {n} states have the most patients with {c1}?",
        "List the top {n} states by number of patients diagnosed with {c1}.",
        "In which {n} US states do we find the highest count of {c1} patients?",
    ],
    f"""
    SELECT l.state, COUNT(DISTINCT p.person_id) AS patient_count
    FROM person p
    JOIN location l ON l.location_id = p.location_id
    WHERE p.person_id IN (
        SELECT co.person_id
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C1')}
    )
    GROUP BY l.state
    ORDER BY patient_count DESC, l.state
    LIMIT {{n}}
    """,
    [
        {"c1": "COPD", "n": 3},
        {"c1": "lung cancer", "n": 5},
    ],
)

family(
    "comorbidity_share",
    [
        "What percentage of patients with {c1} also have {c2}?",
        "Among {c1} patients, what share has a diagnosis of {c2} as well?",
        "Give the proportion (in %) of patients diagnosed with {c1} who are also diagnosed with {c2}.",
    ],
    f"""
    WITH cohort_a AS (
        SELECT DISTINCT co.person_id
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C1')}
    ),
    cohort_b AS (
        SELECT DISTINCT co.person_id
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C2')}
    )
    SELECT ROUND(100.0 * COUNT(b.person_id) / COUNT(*), 1) AS percentage
    FROM cohort_a a
    LEFT JOIN cohort_b b ON b.person_id = a.person_id
    """,
    [
        {"c1": "type 2 diabetes", "c2": "chronic kidney disease"},
        {"c1": "heart failure", "c2": "atrial fibrillation"},
        {"c1": "psoriasis", "c2": "depression"},
    ],
)

family(
    "measurement_mean_in_cohort",
    [
        "What is the average {m1} value among patients with {c1}?",
        "Among patients diagnosed with {c1}, what is the mean recorded {m1}?",
        "Calculate the mean {m1} result for {c1} patients, by unit.",
    ],
    f"""
    SELECT m.unit_concept_id,
           ROUND(AVG(m.value_as_number), 2) AS mean_value,
           COUNT(*) AS n_measurements
    FROM measurement m
    WHERE m.measurement_concept_id IN {{M1}}
      AND m.value_as_number IS NOT NULL
      AND m.person_id IN (
          SELECT co.person_id
          FROM condition_occurrence co
          WHERE co.condition_concept_id IN {desc('C1')}
      )
    GROUP BY m.unit_concept_id
    """,
    [
        {"m1": "HbA1c", "c1": "type 2 diabetes"},
        {"m1": "LDL cholesterol", "c1": "coronary artery disease"},
        {"m1": "eGFR", "c1": "chronic kidney disease"},
    ],
)

family(
    "measurement_above_threshold",
    [
        "How many patients had a {m1} above {thr} in {year}?",
        "Count patients with at least one {m1} result greater than {thr} during {year}.",
        "In {year}, how many people had a {m1} value exceeding {thr}?",
    ],
    """
    SELECT COUNT(DISTINCT m.person_id) AS patient_count
    FROM measurement m
    WHERE m.measurement_concept_id IN {M1}
      AND m.value_as_number > {thr}
      AND strftime('%Y', m.measurement_date) = '{year}'
    """,
    [
        {"m1": "HbA1c", "thr": 9, "year": 2009},
        {"m1": "body mass index", "thr": 35, "year": 2010},
        {"m1": "systolic blood pressure", "thr": 160, "year": 2008},
    ],
)

family(
    "procedure_after_dx",
    [
        "How many patients with {c1} underwent {p1} within {days} days of diagnosis?",
        "Among those diagnosed with {c1}, how many had a {p1} in the following {days} days?",
        "Count {c1} patients who received {p1} no more than {days} days after their diagnosis date.",
    ],
    f"""
    SELECT COUNT(DISTINCT co.person_id) AS patient_count
    FROM condition_occurrence co
    JOIN procedure_occurrence po ON po.person_id = co.person_id
    WHERE co.condition_concept_id IN {desc('C1')}
      AND po.procedure_concept_id IN {{P1}}
      AND po.procedure_date >= co.condition_start_date
      AND julianday(po.procedure_date) - julianday(co.condition_start_date) <= {{days}}
    """,
    [
        {"c1": "colon cancer", "p1": "colonoscopy", "days": 60},
        {"c1": "myocardial infarction", "p1": "percutaneous coronary intervention", "days": 7},
        {"c1": "osteoarthritis", "p1": "knee replacement", "days": 365},
    ],
)

family(
    "inpatient_length_of_stay",
    [
        "What was the average length of inpatient stay for patients with {c1} in {year}?",
        "For {year}, compute the mean length of hospital stay in days for inpatient visits of {c1} patients.",
        "How many days on average did patients with {c1} stay in hospital during {year}?",
    ],
    f"""
    SELECT COUNT(*) AS n_visits,
           ROUND(AVG(julianday(v.visit_end_date) - julianday(v.visit_start_date)), 2) AS mean_length_of_stay
    FROM visit_occurrence v
    WHERE v.visit_concept_id = 9201
      AND strftime('%Y', v.visit_start_date) = '{{year}}'
      AND v.person_id IN (
          SELECT co.person_id
          FROM condition_occurrence co
          WHERE co.condition_concept_id IN {desc('C1')}
      )
    """,
    [
        {"c1": "pneumonia", "year": 2009},
        {"c1": "heart failure", "year": 2010},
    ],
)

family(
    "one_year_mortality",
    [
        "What percentage of patients diagnosed with {c1} died within one year of their first diagnosis?",
        "Compute the one-year mortality, in percent, after a first diagnosis of {c1}.",
        "Among {c1} patients, what share died in the 365 days after first diagnosis?",
    ],
    f"""
    WITH {first_dx('C1')}
    SELECT ROUND(100.0 * SUM(
        CASE WHEN d.death_date IS NOT NULL
              AND julianday(d.death_date) - julianday(f.index_date) BETWEEN 0 AND 365
             THEN 1 ELSE 0 END
    ) / COUNT(*), 1) AS mortality_pct
    FROM first_dx f
    LEFT JOIN death d ON d.person_id = f.person_id
    """,
    [
        {"c1": "lung cancer"},
        {"c1": "heart failure"},
        {"c1": "dementia"},
    ],
)

family(
    "causes_of_death_among_users",
    [
        "What are the {n} most common causes of death among patients who took {d1}?",
        "List the top {n} causes of death for patients exposed to {d1}.",
        "For people who received {d1}, which {n} causes of death occur most often?",
    ],
    f"""
    SELECT c.concept_name AS cause_of_death, COUNT(*) AS deaths
    FROM death d
    JOIN concept c ON c.concept_id = d.cause_concept_id
    WHERE d.person_id IN (
        SELECT de.person_id
        FROM drug_exposure de
        WHERE de.drug_concept_id IN {desc('D1')}
    )
    GROUP BY c.concept_name
    ORDER BY deaths DESC, cause_of_death
    LIMIT {{n}}
    """,
    [
        {"d1": "warfarin", "n": 5},
        {"d1": "insulin glargine", "n": 3},
    ],
)

family(
    "days_supply_elderly",
    [
        "What is the average days of supply of {d1} prescriptions for patients older than {age}?",
        "For patients above {age} years of age, what is the mean days supply of {d1} and the total quantity dispensed?",
        "Report the mean days supply and total dispensed quantity of {d1} among patients over {age}.",
    ],
    f"""
    SELECT ROUND(AVG(de.days_supply), 1) AS mean_days_supply,
           ROUND(SUM(de.quantity), 0) AS total_quantity
    FROM drug_exposure de
    JOIN person p ON p.person_id = de.person_id
    WHERE de.drug_concept_id IN {desc('D1')}
      AND CAST(strftime('%Y', de.drug_exposure_start_date) AS INTEGER) - p.year_of_birth > {{age}}
    """,
    [
        {"d1": "amlodipine", "age": 75},
        {"d1": "oxycodone", "age": 65},
        {"d1": "levothyroxine", "age": 80},
    ],
)

family(
    "first_line_therapy",
    [
        "Among newly diagnosed {c1} patients with at least one year of prior observation, what proportion started {d1} versus {d2} as first treatment?",
        "For incident {c1} cases with 365 days of prior observation, how many began treatment with {d1} and how many with {d2}, and what percentage does each represent?",
        "What is the split between {d1} and {d2} as first-line therapy among new {c1} patients observed for a year before diagnosis?",
    ],
    f"""
    WITH {first_dx('C1')},
    new_cases AS (
        SELECT f.person_id, f.index_date
        FROM first_dx f
        JOIN observation_period op ON op.person_id = f.person_id
        WHERE op.observation_period_start_date <= date(f.index_date, '-365 days')
          AND op.observation_period_end_date >= f.index_date
    ),
    first_tx AS (
        SELECT n.person_id, de.drug_concept_id,
               ROW_NUMBER() OVER (
                   PARTITION BY n.person_id
                   ORDER BY de.drug_exposure_start_date, de.drug_concept_id
               ) AS rn
        FROM new_cases n
        JOIN drug_exposure de ON de.person_id = n.person_id
        WHERE de.drug_exposure_start_date >= n.index_date
          AND (de.drug_concept_id IN {{D1}} OR de.drug_concept_id IN {{D2}})
    )
    SELECT CASE WHEN t.drug_concept_id IN {{D1}} THEN '{{d1}}' ELSE '{{d2}}' END AS first_treatment,
           COUNT(*) AS patient_count,
           ROUND(100.0 * COUNT(*) / (SELECT COUNT(*) FROM new_cases), 1) AS percentage
    FROM first_tx t
    WHERE t.rn = 1
    GROUP BY first_treatment
    ORDER BY first_treatment
    """,
    [
        {"c1": "type 2 diabetes", "d1": "metformin", "d2": "glipizide"},
        {"c1": "atrial fibrillation", "d1": "warfarin", "d2": "apixaban"},
        {"c1": "hypertension", "d1": "lisinopril", "d2": "amlodipine"},
    ],
)

family(
    "incidence_rate",
    [
        "What is the incidence rate of {c1} per 1,000 person-years in {year}?",
        "Compute the number of new {c1} cases per 1000 person-years of observation in {year}.",
        "How many incident cases of {c1} per thousand person-years were observed during {year}?",
    ],
    f"""
    WITH at_risk AS (
        SELECT op.person_id,
               MAX(julianday(MIN(op.observation_period_end_date, '{{year}}-12-31'))
                   - julianday(MAX(op.observation_period_start_date, '{{year}}-01-01')), 0) / 365.25 AS years_at_risk
        FROM observation_period op
        WHERE op.observation_period_start_date <= '{{year}}-12-31'
          AND op.observation_period_end_date >= '{{year}}-01-01'
    ),
    cases AS (
        SELECT co.person_id, MIN(co.condition_start_date) AS index_date
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C1')}
        GROUP BY co.person_id
        HAVING MIN(co.condition_start_date) BETWEEN '{{year}}-01-01' AND '{{year}}-12-31'
    )
    SELECT COUNT(c.person_id) AS new_cases,
           ROUND(SUM(a.years_at_risk), 1) AS person_years,
           ROUND(1000.0 * COUNT(c.person_id) / SUM(a.years_at_risk), 2) AS incidence_per_1000_py
    FROM at_risk a
    LEFT JOIN cases c ON c.person_id = a.person_id
    """,
    [
        {"c1": "type 2 diabetes", "year": 2009},
        {"c1": "stroke", "year": 2010},
        {"c1": "pneumonia", "year": 2008},
    ],
)

family(
    "polypharmacy",
    [
        "How many patients with {c1} were prescribed at least {n} different drugs?",
        "Count patients diagnosed with {c1} who received {n} or more distinct medications.",
        "Among {c1} patients, how many have exposure to at least {n} different drug ingredients?",
    ],
    f"""
    SELECT COUNT(*) AS patient_count
    FROM (
        SELECT de.person_id
        FROM drug_exposure de
        WHERE de.person_id IN (
            SELECT co.person_id
            FROM condition_occurrence co
            WHERE co.condition_concept_id IN {desc('C1')}
        )
        GROUP BY de.person_id
        HAVING COUNT(DISTINCT de.drug_concept_id) >= {{n}}
    ) t
    """,
    [
        {"c1": "Alzheimer's disease", "n": 5},
        {"c1": "heart failure", "n": 8},
    ],
)

family(
    "observation_and_condition",
    [
        "How many patients recorded as {o1} have been diagnosed with {c1}?",
        "Among patients with a {o1} observation, how many also have a {c1} diagnosis?",
        "Count the patients flagged as {o1} who have {c1}.",
    ],
    f"""
    SELECT COUNT(DISTINCT o.person_id) AS patient_count
    FROM observation o
    JOIN condition_occurrence co ON co.person_id = o.person_id
    WHERE o.observation_concept_id IN {{O1}}
      AND co.condition_concept_id IN {desc('C1')}
    """,
    [
        {"o1": "current smoker", "c1": "COPD"},
        {"o1": "former smoker", "c1": "lung cancer"},
        {"o1": "family history of diabetes", "c1": "type 2 diabetes"},
    ],
)

family(
    "specialty_visits",
    [
        "How many patients with {c1} had a visit with a {spec} provider?",
        "Count patients diagnosed with {c1} who were seen by {spec}, and at how many care sites.",
        "How many {c1} patients visited a provider specialized in {spec}?",
    ],
    f"""
    SELECT COUNT(DISTINCT v.person_id) AS patient_count,
           COUNT(DISTINCT v.care_site_id) AS care_sites
    FROM visit_occurrence v
    JOIN provider pr ON pr.provider_id = v.provider_id
    JOIN concept c ON c.concept_id = pr.specialty_concept_id
    WHERE c.concept_name = '{{spec}}'
      AND v.person_id IN (
          SELECT co.person_id
          FROM condition_occurrence co
          WHERE co.condition_concept_id IN {desc('C1')}
      )
    """,
    [
        {"c1": "atrial fibrillation", "spec": "Cardiology"},
        {"c1": "type 1 diabetes", "spec": "Endocrinology"},
        {"c1": "epilepsy", "spec": "Neurology"},
    ],
)

family(
    "age_groups",
    [
        "How many patients with {c1} fall into the age groups under 40, 40 to 64, and 65 or older at first diagnosis?",
        "Group {c1} patients by age at first diagnosis (<40, 40-64, 65+) and count each group.",
        "What is the distribution of age at first {c1} diagnosis across the bands below 40, 40-64 and 65 and over?",
    ],
    f"""
    SELECT CASE WHEN t.age < 40 THEN '<40'
                WHEN t.age < 65 THEN '40-64'
                ELSE '65+' END AS age_group,
           COUNT(*) AS patient_count
    FROM (
        SELECT co.person_id,
               MIN(CAST(strftime('%Y', co.condition_start_date) AS INTEGER)) - p.year_of_birth AS age
        FROM condition_occurrence co
        JOIN person p ON p.person_id = co.person_id
        WHERE co.condition_concept_id IN {desc('C1')}
        GROUP BY co.person_id, p.year_of_birth
    ) t
    GROUP BY age_group
    ORDER BY age_group
    """,
    [
        {"c1": "asthma"},
        {"c1": "multiple sclerosis"},
        {"c1": "hypothyroidism"},
    ],
)

family(
    "drug_switch",
    [
        "How many patients switched from {d1} to {d2}?",
        "Count patients who started {d2} after their last {d1} exposure had ended.",
        "How many people moved from {d1} therapy to {d2}?",
    ],
    """
    WITH exposure_a AS (
        SELECT de.person_id,
               MIN(de.drug_exposure_start_date) AS start_a,
               MAX(de.drug_exposure_end_date) AS last_a
        FROM drug_exposure de
        WHERE de.drug_concept_id IN {D1}
        GROUP BY de.person_id
    ),
    exposure_b AS (
        SELECT de.person_id, MIN(de.drug_exposure_start_date) AS start_b
        FROM drug_exposure de
        WHERE de.drug_concept_id IN {D2}
        GROUP BY de.person_id
    )
    SELECT COUNT(*) AS patient_count
    FROM exposure_a a
    JOIN exposure_b b ON b.person_id = a.person_id
    WHERE b.start_b > a.start_a
      AND b.start_b >= a.last_a
    """,
    [
        {"d1": "warfarin", "d2": "rivaroxaban"},
        {"d1": "simvastatin", "d2": "atorvastatin"},
    ],
)

family(
    "monthly_new_diagnoses",
    [
        "How many patients were newly diagnosed with {c1} in each month of {year}?",
        "Show the monthly count of first-time {c1} diagnoses during {year}.",
        "Per month of {year}, how many new {c1} patients were there?",
    ],
    f"""
    SELECT strftime('%m', t.first_date) AS month, COUNT(*) AS new_patients
    FROM (
        SELECT co.person_id, MIN(co.condition_start_date) AS first_date
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C1')}
        GROUP BY co.person_id
    ) t
    WHERE strftime('%Y', t.first_date) = '{{year}}'
    GROUP BY month
    ORDER BY month
    """,
    [
        {"c1": "pneumonia", "year": 2009},
        {"c1": "acute bronchitis", "year": 2008},
    ],
)

family(
    "standard_conditions_of_users",
    [
        "Which standard SNOMED condition concepts are recorded for patients treated with {d1}, and how many patients have each?",
        "List the ten most frequent standard SNOMED conditions among {d1} users with patient counts.",
        "For patients exposed to {d1}, what are the most common standard SNOMED condition concepts?",
    ],
    f"""
    SELECT c.concept_name, COUNT(DISTINCT co.person_id) AS patient_count
    FROM condition_occurrence co
    JOIN concept c ON c.concept_id = co.condition_concept_id
    WHERE c.domain_id = 'Condition'
      AND c.vocabulary_id = 'SNOMED'
      AND c.standard_concept = 'S'
      AND co.person_id IN (
          SELECT de.person_id
          FROM drug_exposure de
          WHERE de.drug_concept_id IN {desc('D1')}
      )
    GROUP BY c.concept_name
    ORDER BY patient_count DESC, c.concept_name
    LIMIT 10
    """,
    [
        {"d1": "methotrexate"},
        {"d1": "prednisone"},
    ],
)

family(
    "county_breakdown",
    [
        "How many patients with {c1} live in each county of {state_name}?",
        "Break down {c1} patients residing in {state_name} by county, including the number of ZIP codes.",
        "For {state_name}, list the counties with the number of patients diagnosed with {c1}.",
    ],
    f"""
    SELECT l.county,
           COUNT(DISTINCT p.person_id) AS patient_count,
           COUNT(DISTINCT l.zip) AS zip_codes
    FROM person p
    JOIN location l ON l.location_id = p.location_id
    WHERE l.state = '{{state}}'
      AND p.person_id IN (
          SELECT co.person_id
          FROM condition_occurrence co
          WHERE co.condition_concept_id IN {desc('C1')}
      )
    GROUP BY l.county
    ORDER BY patient_count DESC, l.county
    """,
    [
        {"c1": "asthma", "state": "CA"},
        {"c1": "obesity", "state": "TX"},
    ],
)

family(
    "hispanic_share",
    [
        "What proportion of patients with {c1} treated with {d1} are Hispanic or Latino?",
        "Among {c1} patients who received {d1}, what percentage is of Hispanic or Latino ethnicity?",
        "Give the share of Hispanic or Latino patients among those with {c1} on {d1}.",
    ],
    f"""
    SELECT ROUND(100.0 * SUM(CASE WHEN p.ethnicity_concept_id = 38003563 THEN 1 ELSE 0 END) / COUNT(*), 1) AS hispanic_pct
    FROM person p
    WHERE p.person_id IN (
        SELECT co.person_id
        FROM condition_occurrence co
        WHERE co.condition_concept_id IN {desc('C1')}
    )
      AND p.person_id IN (
        SELECT de.person_id
        FROM drug_exposure de
        WHERE de.drug_concept_id IN {desc('D1')}
    )
    """,
    [
        {"c1": "type 2 diabetes", "d1": "sitagliptin"},
        {"c1": "asthma", "d1": "albuterol"},
    ],
)

family(
    "measurement_change_after_start",
    [
        "Among patients who started {d1}, how many had a lower average {m1} after treatment start than before?",
        "For {d1} initiators with {m1} values both before and after the first exposure, how many improved?",
        "How many patients saw their mean {m1} decrease after beginning {d1}?",
    ],
    f"""
    WITH first_start AS (
        SELECT de.person_id, MIN(de.drug_exposure_start_date) AS start_date
        FROM drug_exposure de
        WHERE de.drug_concept_id IN {desc('D1')}
        GROUP BY de.person_id
    ),
    pre_values AS (
        SELECT s.person_id, AVG(m.value_as_number) AS mean_value
        FROM first_start s
        JOIN measurement m ON m.person_id = s.person_id
        WHERE m.measurement_concept_id IN {{M1}}
          AND m.measurement_date < s.start_date
        GROUP BY s.person_id
    ),
    post_values AS (
        SELECT s.person_id, AVG(m.value_as_number) AS mean_value
        FROM first_start s
        JOIN measurement m ON m.person_id = s.person_id
        WHERE m.measurement_concept_id IN {{M1}}
          AND m.measurement_date > s.start_date
        GROUP BY s.person_id
    )
    SELECT COUNT(*) AS patients_with_both,
           SUM(CASE WHEN post.mean_value < pre.mean_value THEN 1 ELSE 0 END) AS improved
    FROM pre_values pre
    JOIN post_values post ON post.person_id = pre.person_id
    """,
    [
        {"d1": "metformin", "m1": "HbA1c"},
        {"d1": "atorvastatin", "m1": "LDL cholesterol"},
        {"d1": "lisinopril", "m1": "systolic blood pressure"},
    ],
)

family(
    "readmission_rate",
    [
        "What is the 30-day readmission rate for inpatient stays with a {c1} diagnosis?",
        "For hospitalizations where {c1} was diagnosed, what percentage were followed by another inpatient admission within 30 days?",
        "Compute the proportion of {c1} inpatient visits with a readmission in the next 30 days.",
    ],
    f"""
    WITH index_stays AS (
        SELECT DISTINCT v.visit_occurrence_id, v.person_id, v.visit_end_date
        FROM visit_occurrence v
        JOIN condition_occurrence co ON co.visit_occurrence_id = v.visit_occurrence_id
        WHERE v.visit_concept_id = 9201
          AND co.condition_concept_id IN {desc('C1')}
    )
    SELECT COUNT(*) AS index_stays,
           SUM(t.readmitted) AS readmissions,
           ROUND(100.0 * SUM(t.readmitted) / COUNT(*), 1) AS readmission_rate
    FROM (
        SELECT s.visit_occurrence_id,
               CASE WHEN EXISTS (
                   SELECT 1
                   FROM visit_occurrence r
                   WHERE r.person_id = s.person_id
                     AND r.visit_concept_id = 9201
                     AND r.visit_start_date > s.visit_end_date
                     AND julianday(r.visit_start_date) - julianday(s.visit_end_date) <= 30
               ) THEN 1 ELSE 0 END AS readmitted
        FROM index_stays s
    ) t
    """,
    [
        {"c1": "heart failure"},
        {"c1": "pneumonia"},
        {"c1": "COPD"},
    ],
)

family(
    "never_treated",
    [
        "How many patients with {c1} have never been prescribed {d1}?",
        "Count {c1} patients without any {d1} exposure.",
        "How many people diagnosed with {c1} never received {d1}?",
    ],
    f"""
    SELECT COUNT(DISTINCT co.person_id) AS patient_count
    FROM condition_occurrence co
    WHERE co.condition_concept_id IN {desc('C1')}
      AND NOT EXISTS (
          SELECT 1
          FROM drug_exposure de
          WHERE de.person_id = co.person_id
            AND de.drug_concept_id IN {desc('D1')}
      )
    """,
    [
        {"c1": "atrial fibrillation", "d1": "anticoagulant"},
        {"c1": "type 2 diabetes", "d1": "metformin"},
        {"c1": "coronary artery disease", "d1": "statin"},
    ],
)

family(
    "quantity_by_gender",
    [
        "What total quantity of {d1} was dispensed in {year}, by gender?",
        "Break down the dispensed quantity of {d1} in {year} by patient gender.",
        "In {year}, how much {d1} was dispensed to men and to women, and to how many patients?",
    ],
    f"""
    SELECT c.concept_name AS gender,
           ROUND(SUM(de.quantity), 0) AS total_quantity,
           COUNT(DISTINCT de.person_id) AS patients
    FROM drug_exposure de
    JOIN person p ON p.person_id = de.person_id
    JOIN concept c ON c.concept_id = p.gender_concept_id
    WHERE de.drug_concept_id IN {desc('D1')}
      AND de.drug_exposure_start_date BETWEEN '{{year}}-01-01' AND '{{year}}-12-31'
    GROUP BY c.concept_name
    ORDER BY gender
    """,
    [
        {"d1": "oxycodone", "year": 2009},
        {"d1": "amoxicillin", "year": 2010},
    ],
)

family(
    "women_age_band",
    [
        "How many women aged {lo} to {hi} in {year} have {c1}?",
        "Count female patients between {lo} and {hi} years old in {year} with a diagnosis of {c1}.",
        "In {year}, how many women in the {lo}-{hi} age range were diagnosed with {c1}?",
    ],
    f"""
    SELECT COUNT(DISTINCT p.person_id) AS patient_count
    FROM person p
    JOIN condition_occurrence co ON co.person_id = p.person_id
    WHERE p.gender_concept_id = 8532
      AND {{year}} - p.year_of_birth BETWEEN {{lo}} AND {{hi}}
      AND co.condition_concept_id IN {desc('C1')}
    """,
    [
        {"c1": "breast cancer", "lo": 50, "hi": 74, "year": 2009},
        {"c1": "osteoporosis", "lo": 65, "hi": 90, "year": 2010},
    ],
)

family(
    "deaths_by_gender",
    [
        "How many patients died in {year}, by gender?",
        "Break down the number of deaths recorded in {year} by gender.",
        "What is the number of deaths in {year} for men and for women?",
    ],
    """
    SELECT c.concept_name AS gender, COUNT(*) AS deaths
    FROM death d
    JOIN person p ON p.person_id = d.person_id
    JOIN concept c ON c.concept_id = p.gender_concept_id
    WHERE strftime('%Y', d.death_date) = '{year}'
    GROUP BY c.concept_name
    ORDER BY gender
    """,
    [
        {"year": 2008},
        {"year": 2009},
        {"year": 2010},
    ],
)

family(
    "observation_length_by_state",
    [
        "What is the average observation period length in days per state for patients born before {by}?",
        "For patients born before {by}, compute the mean length of observation in days by state.",
        "By state, how many days of observation do patients born prior to {by} have on average?",
    ],
    """
    SELECT l.state,
           COUNT(DISTINCT p.person_id) AS patients,
           ROUND(AVG(julianday(op.observation_period_end_date) - julianday(op.observation_period_start_date)), 1) AS mean_days
    FROM observation_period op
    JOIN person p ON p.person_id = op.person_id
    JOIN location l ON l.location_id = p.location_id
    WHERE p.year_of_birth < {by}
    GROUP BY l.state
    ORDER BY l.state
    """,
    [
        {"by": 1940},
        {"by": 1960},
    ],
)

family(
    "multimorbidity",
    [
        "How many patients have at least two of the following conditions: {c1}, {c2}, {c3}?",
        "Count patients diagnosed with two or more of {c1}, {c2} and {c3}.",
        "Among all patients, how many have at least two conditions out of {c1}, {c2}, and {c3}?",
    ],
    f"""
    SELECT COUNT(*) AS patient_count
    FROM (
        SELECT co.person_id,
               MAX(CASE WHEN co.condition_concept_id IN {desc('C1')} THEN 1 ELSE 0 END)
             + MAX(CASE WHEN co.condition_concept_id IN {desc('C2')} THEN 1 ELSE 0 END)
             + MAX(CASE WHEN co.condition_concept_id IN {desc('C3')} THEN 1 ELSE 0 END) AS n_conditions
        FROM condition_occurrence co
        GROUP BY co.person_id
    ) t
    WHERE t.n_conditions >= 2
    """,
    [
        {"c1": "diabetes", "c2": "hypertension", "c3": "hyperlipidemia"},
        {"c1": "COPD", "c2": "heart failure", "c3": "chronic kidney disease"},
        {"c1": "depression", "c2": "anxiety", "c3": "insomnia"},
    ],
)

family(
    "cause_specific_deaths",
    [
        "How many patients with {c1} died with {c2} recorded as the cause of death?",
        "Count deaths attributed to {c2} among patients previously diagnosed with {c1}.",
        "Among {c1} patients, how many deaths had {c2} as the cause?",
    ],
    f"""
    SELECT COUNT(*) AS deaths
    FROM death d
    WHERE d.cause_concept_id IN {desc('C2')}
      AND d.person_id IN (
          SELECT co.person_id
          FROM condition_occurrence co
          WHERE co.condition_concept_id IN {desc('C1')}
            AND co.condition_start_date <= d.death_date
      )
    """,
    [
        {"c1": "type 2 diabetes", "c2": "myocardial infarction"},
        {"c1": "atrial fibrillation", "c2": "stroke"},
        {"c1": "COPD", "c2": "lung cancer"},
    ],
)

family(
    "visits_per_patient",
    [
        "What is the average number of {visit} visits per patient with {c1} in {year}?",
        "For {c1} patients, how many {visit} visits did each have on average during {year}?",
        "Compute the mean count of {visit} visits in {year} among patients diagnosed with {c1}.",
    ],
    f"""
    SELECT ROUND(AVG(t.n_visits), 2) AS mean_visits
    FROM (
        SELECT p.person_id, COUNT(v.visit_occurrence_id) AS n_visits
        FROM person p
        LEFT JOIN visit_occurrence v
               ON v.person_id = p.person_id
              AND v.visit_concept_id = {{visit_id}}
              AND strftime('%Y', v.visit_start_date) = '{{year}}'
        WHERE p.person_id IN (
            SELECT co.person_id
            FROM condition_occurrence co
            WHERE co.condition_concept_id IN {desc('C1')}
        )
        GROUP BY p.person_id
    ) t
    """,
    [
        {"c1": "COPD", "visit": "emergency room", "visit_id": 9203, "year": 2009},
        {"c1": "diabetes", "visit": "outpatient", "visit_id": 9202, "year": 2010},
        {"c1": "heart failure", "visit": "inpatient", "visit_id": 9201, "year": 2008},
    ],
)

family(
    "treatment_duration",
    [
        "What is the average total duration in days of {d1} treatment for patients with {c1}?",
        "For patients diagnosed with {c1}, how many days in total were they exposed to {d1} on average?",
        "Compute the mean cumulative {d1} exposure in days among {c1} patients.",
    ],
    f"""
    SELECT ROUND(AVG(t.total_days), 1) AS mean_exposure_days
    FROM (
        SELECT de.person_id,
               SUM(julianday(de.drug_exposure_end_date) - julianday(de.drug_exposure_start_date) + 1) AS total_days
        FROM drug_exposure de
        WHERE de.drug_concept_id IN {desc('D1')}
          AND de.person_id IN (
              SELECT co.person_id
              FROM condition_occurrence co
              WHERE co.condition_concept_id IN {desc('C1')}
          )
        GROUP BY de.person_id
    ) t
    """,
    [
        {"c1": "rheumatoid arthritis", "d1": "methotrexate"},
        {"c1": "hypothyroidism", "d1": "levothyroxine"},
    ],
)

family(
    "screening_uptake",
    [
        "What percentage of women aged {lo} to {hi} in {year} had a {p1} that year?",
        "Among female patients between {lo} and {hi} years old in {year}, what share received {p1} during {year}?",
        "Compute the {year} {p1} rate, in percent, for women aged {lo}-{hi}.",
    ],
    """
    WITH eligible AS (
        SELECT p.person_id
        FROM person p
        WHERE p.gender_concept_id = 8532
          AND {year} - p.year_of_birth BETWEEN {lo} AND {hi}
    )
    SELECT COUNT(*) AS eligible_women,
           ROUND(100.0 * SUM(CASE WHEN EXISTS (
               SELECT 1
               FROM procedure_occurrence po
               WHERE po.person_id = e.person_id
                 AND po.procedure_concept_id IN {P1}
                 AND strftime('%Y', po.procedure_date) = '{year}'
           ) THEN 1 ELSE 0 END) / COUNT(*), 1) AS uptake_pct
    FROM eligible e
    """,
    [
        {"p1": "mammography", "lo": 50, "hi": 74, "year": 2009},
        {"p1": "colonoscopy", "lo": 50, "hi": 75, "year": 2010},
    ],
)

family(
    "concurrent_drugs",
    [
        "How many patients were exposed to {d1} and {d2} at the same time?",
        "Count patients with overlapping exposure periods of {d1} and {d2}.",
        "How many people received {d1} concurrently with {d2}?",
    ],
    f"""
    SELECT COUNT(DISTINCT a.person_id) AS patient_count
    FROM drug_exposure a
    JOIN drug_exposure b ON b.person_id = a.person_id
    WHERE a.drug_concept_id IN {desc('D1')}
      AND b.drug_concept_id IN {desc('D2')}
      AND a.drug_exposure_start_date <= b.drug_exposure_end_date
      AND b.drug_exposure_start_date <= a.drug_exposure_end_date
    """,
    [
        {"d1": "warfarin", "d2": "aspirin"},
        {"d1": "clopidogrel", "d2": "omeprazole"},
        {"d1": "oxycodone", "d2": "acetaminophen"},
    ],
)

family(
    "patients_in_period",
    [
        "How many patients had a {p1} between {start} and {end}?",
        "Count patients who underwent {p1} from {start} to {end}.",
        "What is the number of patients with a {p1} performed between {start} and {end}?",
    ],
    """
    SELECT COUNT(DISTINCT po.person_id) AS patient_count
    FROM procedure_occurrence po
    WHERE po.procedure_concept_id IN {P1}
      AND po.procedure_date BETWEEN '{start}' AND '{end}'
    """,
    [
        {"p1": "hip replacement", "start": "2009-01-01", "end": "2009-06-30"},
        {"p1": "cataract surgery", "start": "2008-01-01", "end": "2010-12-31"},
    ],
)


def placeholder(slot, inst):
    domain = DOMAINS[slot[0]]
    mention = inst[slot.lower()]
    return f"[{domain}@{mention}]"


def instantiate(fam, inst):
    values = dict(inst)
    if "state" in values:
        values["state_name"] = STATES[values["state"]]
    slots = sorted(set(re.findall(r"\{([CDPMO][0-9])\}", fam["sql"])))
    for slot in slots:
        values[slot] = placeholder(slot, inst)
    sql = fam["sql"].format(**values)
    questions = [q.format(**values) for q in fam["questions"]]
    entities = []
    for slot in slots:
        e = {"mention": inst[slot.lower()], "domain": DOMAINS[slot[0]]}
        if e not in entities:
            entities.append(e)
    return sql, questions, entities


def build():
    records = []
    n = 0
    for fam in FAMILIES:
        for inst in fam["instances"]:
            n += 1
            group = f"q{n:03d}"
            sql, questions, entities = instantiate(fam, inst)
            for suffix, question in zip("abc", questions):
                for e in entities:
                    assert e["mention"].lower() in question.lower(), (group, e, question)
                records.append(
                    {
                        "id": f"{group}{suffix}",
                        "question": question,
                        "sql_template": sql,
                        "paraphrase_group": group,
                        "entities": entities,
                        "tags": [fam["key"]] + (["paraphrase"] if suffix != "a" else []),
                    }
                )
    return records


def check(records):
    con = sqlite3.connect(":memory:")
    with open(SCHEMA) as f:
        con.executescript(f.read())
    seen = set()
    for r in records:
        if r["sql_template"] in seen:
            continue
        seen.add(r["sql_template"])
        sql = re.sub(r"\[(condition|drug|procedure|measurement|observation|device)@[^\]@]+\]", "(0)", r["sql_template"])
        try:
            con.execute("EXPLAIN " + sql)
        except sqlite3.Error as e:
            print(r["id"], e, file=sys.stderr)
            print(sql, file=sys.stderr)
            sys.exit(1)


def main():
    records = build()
    if "--check" in sys.argv:
        check(records)
    with open(os.path.join(HERE, "epi_questions.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")
    print(f"{len(FAMILIES)} families, {len(records) // 3} groups, {len(records)} records")


if __name__ == "__main__":
    main()
