#!/usr/bin/env python3
"""Writes the bundled mini ontology (concepts.tsv, concept_ancestor.tsv).

The concept table mirrors the OMOP `concept` columns used by the engine. Ids
follow OMOP conventions but the file is a small fixture, not a vocabulary
release. Re-run after editing the tables below.
"""

import csv
import os

HERE = os.path.dirname(os.path.abspath(__file__))

# (concept_id, concept_name, domain_id, vocabulary_id, standard_concept)
CONDITIONS = [
    (201820, "Diabetes mellitus"),
    (201826, "Type 2 diabetes mellitus"),
    (201254, "Type 1 diabetes mellitus"),
    (443730, "Diabetic neuropathy"),
    (316866, "Hypertensive disorder"),
    (313217, "Atrial fibrillation"),
    (4185932, "Ischemic heart disease"),
    (4329847, "Myocardial infarction"),
    (317576, "Coronary arteriosclerosis"),
    (316139, "Heart failure"),
    (255573, "Chronic obstructive lung disease"),
    (317009, "Asthma"),
    (46271022, "Chronic kidney disease"),
    (432867, "Hyperlipidemia"),
    (80180, "Osteoarthritis"),
    (80809, "Rheumatoid arthritis"),
    (80502, "Osteoporosis"),
    (4182210, "Dementia"),
    (378419, "Alzheimer's disease"),
    (381270, "Parkinson's disease"),
    (440383, "Depressive disorder"),
    (441542, "Anxiety disorder"),
    (433736, "Obesity"),
    (31317, "Dysphagia"),
    (443392, "Malignant neoplastic disease"),
    (4112853, "Malignant tumor of breast"),
    (443388, "Malignant tumor of lung"),
    (4163261, "Malignant tumor of prostate"),
    (4180790, "Malignant tumor of colon"),
    (381591, "Cerebrovascular disease"),
    (443454, "Cerebral infarction"),
    (140168, "Psoriasis"),
    (81893, "Ulcerative colitis"),
    (201606, "Crohn's disease"),
    (140673, "Hypothyroidism"),
    (194984, "Disease of liver"),
    (435783, "Schizophrenia"),
    (436665, "Bipolar disorder"),
    (255848, "Pneumonia"),
    (260139, "Acute bronchitis"),
    (318736, "Migraine"),
    (380378, "Epilepsy"),
    (313459, "Sleep apnea"),
    (374919, "Multiple sclerosis"),
    (4245975, "Chronic hepatitis C"),
    (77670, "Chest pain"),
    (4223659, "Fatigue"),
    (437663, "Fever"),
    (254761, "Cough"),
    (4329041, "Pain"),
    (4266367, "Influenza"),
    (436962, "Insomnia"),
]

DRUGS = [
    (1503297, "metformin"),
    (1559684, "glipizide"),
    (1502905, "insulin glargine"),
    (1580747, "sitagliptin"),
    (45774751, "empagliflozin"),
    (40170911, "liraglutide"),
    (1545958, "atorvastatin"),
    (1539403, "simvastatin"),
    (1510813, "rosuvastatin"),
    (1332418, "amlodipine"),
    (1308216, "lisinopril"),
    (1367500, "losartan"),
    (1307046, "metoprolol"),
    (974166, "hydrochlorothiazide"),
    (956874, "furosemide"),
    (1310149, "warfarin"),
    (40228152, "dabigatran etexilate"),
    (43013024, "apixaban"),
    (40241331, "rivaroxaban"),
    (1322184, "clopidogrel"),
    (1112807, "aspirin"),
    (1125315, "acetaminophen"),
    (1177480, "ibuprofen"),
    (1124957, "oxycodone"),
    (1154343, "albuterol"),
    (1149380, "fluticasone"),
    (739138, "sertraline"),
    (755695, "fluoxetine"),
    (1713332, "amoxicillin"),
    (1797513, "ciprofloxacin"),
    (1551099, "prednisone"),
    (1305058, "methotrexate"),
    (1119119, "adalimumab"),
    (1501700, "levothyroxine"),
    (715997, "donepezil"),
    (735979, "risperidone"),
    (19005965, "omeprazole"),
    (1710612, "tamoxifen"),
]

# ATC-style drug classes; members listed below in ANCESTRY.
DRUG_CLASSES = [
    (21600744, "Blood glucose lowering drugs, excl. insulins", "ATC"),
    (21601855, "HMG CoA reductase inhibitors", "ATC"),
    (21600961, "Antithrombotic agents", "ATC"),
    (21601782, "Agents acting on the renin-angiotensin system", "ATC"),
    (21604686, "Antidepressants", "ATC"),
]

PROCEDURES = [
    (4249893, "Colonoscopy"),
    (4324693, "Mammography"),
    (4336464, "Coronary artery bypass graft"),
    (4216130, "Percutaneous coronary intervention"),
    (4203771, "Total knee replacement"),
    (4207955, "Total hip replacement"),
    (4146536, "Hemodialysis"),
    (4323002, "Cataract extraction"),
    (4198190, "Appendectomy"),
    (4230911, "Echocardiography"),
    (4133840, "Spirometry"),
    (4163872, "Plain chest X-ray"),
    (4059397, "Magnetic resonance imaging of brain"),
    (4249888, "Upper gastrointestinal endoscopy"),
    (4297505, "Influenza vaccination"),
    (4015701, "Cesarean section"),
    (4322980, "Bariatric operative procedure"),
    (4181193, "Electrocardiogram"),
]

MEASUREMENTS = [
    (3004410, "Hemoglobin A1c measurement"),
    (3028437, "LDL cholesterol measurement"),
    (3004249, "Systolic blood pressure"),
    (3012888, "Diastolic blood pressure"),
    (3038553, "Body mass index"),
    (3025315, "Body weight"),
    (3049187, "Estimated glomerular filtration rate"),
    (3016723, "Serum creatinine measurement"),
    (3000963, "Hemoglobin measurement"),
    (3027114, "Total cholesterol measurement"),
    (3004501, "Fasting glucose measurement"),
    (3019170, "Thyrotropin measurement"),
]

OBSERVATIONS = [
    (4298794, "Current smoker"),
    (4310250, "Former smoker"),
    (4144272, "Never smoked tobacco"),
    (4052351, "Alcohol intake above recommended limits"),
    (4051114, "Family history of diabetes mellitus"),
    (4167217, "Family history of malignant neoplasm"),
    (4299535, "Patient currently pregnant"),
    (4306655, "History of fall"),
    (4058286, "Sedentary lifestyle"),
]

DEVICES = [
    (45771041, "Insulin infusion pump"),
    (4030875, "Cardiac pacemaker"),
    (4097216, "Continuous positive airway pressure unit"),
    (45755431, "Continuous glucose monitoring system"),
    (4061614, "Implantable cardioverter defibrillator"),
]

NON_CLINICAL = [
    (8507, "MALE", "Gender", "Gender", "S"),
    (8532, "FEMALE", "Gender", "Gender", "S"),
    (8527, "White", "Race", "Race", "S"),
    (8516, "Black or African American", "Race", "Race", "S"),
    (8515, "Asian", "Race", "Race", "S"),
    (8657, "American Indian or Alaska Native", "Race", "Race", "S"),
    (38003563, "Hispanic or Latino", "Ethnicity", "Ethnicity", "S"),
    (38003564, "Not Hispanic or Latino", "Ethnicity", "Ethnicity", "S"),
    (9201, "Inpatient Visit", "Visit", "Visit", "S"),
    (9202, "Outpatient Visit", "Visit", "Visit", "S"),
    (9203, "Emergency Room Visit", "Visit", "Visit", "S"),
    (8554, "percent", "Unit", "UCUM", "S"),
    (8840, "milligram per deciliter", "Unit", "UCUM", "S"),
    (8876, "millimeter mercury column", "Unit", "UCUM", "S"),
    (9531, "kilogram per square meter", "Unit", "UCUM", "S"),
    (9529, "kilogram", "Unit", "UCUM", "S"),
    (8795, "milliliter per minute per 1.73 square meter", "Unit", "UCUM", "S"),
    (8713, "gram per deciliter", "Unit", "UCUM", "S"),
    (8748, "milli-international unit per liter", "Unit", "UCUM", "S"),
    (38004446, "General Practice", "Provider", "Medicare Specialty", "S"),
    (38004456, "Internal Medicine", "Provider", "Medicare Specialty", "S"),
    (38004451, "Cardiology", "Provider", "Medicare Specialty", "S"),
    (38004485, "Endocrinology", "Provider", "Medicare Specialty", "S"),
    (38004458, "Neurology", "Provider", "Medicare Specialty", "S"),
    (38004507, "Medical Oncology", "Provider", "Medicare Specialty", "S"),
    (38004472, "Pulmonary Disease", "Provider", "Medicare Specialty", "S"),
    (38004452, "Rheumatology", "Provider", "Medicare Specialty", "S"),
]

# Non-standard source terms that map onto standard concepts; kept so that
# standard_concept filters in queries have something to exclude.
SOURCE_TERMS = [
    (44826460, "Diabetes mellitus without mention of complication, type II", "Condition", "ICD9CM"),
    (44821949, "Essential hypertension, unspecified", "Condition", "ICD9CM"),
    (44832398, "Atrial fibrillation", "Condition", "ICD9CM"),
    (44824250, "Chronic airway obstruction, not elsewhere classified", "Condition", "ICD9CM"),
]

# ancestor -> descendants (self links are added automatically)
ANCESTRY = {
    201820: [201826, 201254, 443730],
    201826: [443730],
    4185932: [4329847, 317576],
    381591: [443454],
    443392: [4112853, 443388, 4163261, 4180790],
    4182210: [378419],
    21600744: [1503297, 1559684, 1580747, 45774751, 40170911],
    21601855: [1545958, 1539403, 1510813],
    21600961: [1310149, 40228152, 43013024, 40241331, 1322184, 1112807],
    21601782: [1308216, 1367500],
    21604686: [739138, 755695],
}


def rows():
    out = []
    for cid, name in CONDITIONS:
        out.append((cid, name, "Condition", "SNOMED", "S"))
    for cid, name in DRUGS:
        out.append((cid, name, "Drug", "RxNorm", "S"))
    for cid, name, vocab in DRUG_CLASSES:
        out.append((cid, name, "Drug", vocab, "C"))
    for cid, name in PROCEDURES:
        out.append((cid, name, "Procedure", "SNOMED", "S"))
    for cid, name in MEASUREMENTS:
        out.append((cid, name, "Measurement", "LOINC", "S"))
    for cid, name in OBSERVATIONS:
        out.append((cid, name, "Observation", "SNOMED", "S"))
    for cid, name in DEVICES:
        out.append((cid, name, "Device", "SNOMED", "S"))
    for cid, name, domain, vocab in SOURCE_TERMS:
        out.append((cid, name, domain, vocab, ""))
    out.extend(NON_CLINICAL)
    ids = [r[0] for r in out]
    assert len(ids) == len(set(ids)), "duplicate concept_id"
    return out


def main():
    concepts = rows()
    with open(os.path.join(HERE, "concepts.tsv"), "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["concept_id", "concept_name", "vocabulary_id", "domain_id", "standard_concept"])
        for cid, name, domain, vocab, std in concepts:
            w.writerow([cid, name, vocab, domain, std])

    known = {r[0] for r in concepts}
    pairs = set()
    for cid in known:
        pairs.add((cid, cid))
    # transitive closure over the small hierarchy
    changed = True
    edges = {(a, d) for a, ds in ANCESTRY.items() for d in ds}
    while changed:
        changed = False
        for a, b in list(edges):
            for c, d in list(edges):
                if b == c and (a, d) not in edges:
                    edges.add((a, d))
                    changed = True
    for a, d in edges:
        assert a in known and d in known, (a, d)
        pairs.add((a, d))
    with open(os.path.join(HERE, "concept_ancestor.tsv"), "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["ancestor_concept_id", "descendant_concept_id"])
        for a, d in sorted(pairs):
            w.writerow([a, d])
    print(f"{len(concepts)} concepts, {len(pairs)} ancestor links")


if __name__ == "__main__":
    main()
