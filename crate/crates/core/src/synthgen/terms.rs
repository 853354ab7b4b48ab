/// `(disease word, ICD-10 category, symptoms, drugs)`.
pub(crate) type DiseaseTerms = (&'static str, &'static str, [&'static str; 3], [&'static str; 3]);

pub(crate) const DISEASES: [DiseaseTerms; 20] = [
    ("pneumonia", "J18", ["cough", "sputum", "crackles"], ["ceftriaxone", "azithromycin", "levofloxacin"]),
    ("meningitis", "G03", ["photophobia", "rigidity", "confusion"], ["vancomycin", "ampicillin", "dexamethasone"]),
    ("botulism", "A05", ["diplopia", "ptosis", "dysphagia"], ["antitoxin", "pyridostigmine", "neostigmine"]),
    ("sepsis", "A41", ["hypotension", "tachycardia", "chills"], ["meropenem", "noradrenaline", "piperacillin"]),
    ("influenza", "J11", ["myalgia", "coryza", "malaise"], ["oseltamivir", "zanamivir", "peramivir"]),
    ("asthma", "J45", ["wheeze", "tightness", "hyperinflation"], ["salbutamol", "budesonide", "montelukast"]),
    ("gastritis", "K29", ["dyspepsia", "epigastralgia", "bloating"], ["omeprazole", "famotidine", "sucralfate"]),
    ("cholecystitis", "K81", ["colic", "icterus", "cholestasis"], ["cefmetazole", "ursodiol", "metronidazole"]),
    ("pancreatitis", "K85", ["backache", "steatorrhea", "lipasemia"], ["gabexate", "nafamostat", "ulinastatin"]),
    ("appendicitis", "K35", ["rebound", "anorexia", "guarding"], ["cefazolin", "clindamycin", "ertapenem"]),
    ("cystitis", "N30", ["dysuria", "pollakiuria", "hematuria"], ["nitrofurantoin", "fosfomycin", "cephalexin"]),
    ("pyelonephritis", "N10", ["rigors", "pyuria", "flank"], ["ciprofloxacin", "cefotaxime", "gentamicin"]),
    ("cellulitis", "L03", ["erythema", "swelling", "warmth"], ["dicloxacillin", "linezolid", "doxycycline"]),
    ("gout", "M10", ["podagra", "tophi", "arthralgia"], ["colchicine", "allopurinol", "febuxostat"]),
    ("angina", "I20", ["diaphoresis", "palpitations", "exertional"], ["nitroglycerin", "isosorbide", "atenolol"]),
    ("hepatitis", "B19", ["jaundice", "hepatomegaly", "fatigue"], ["entecavir", "tenofovir", "glycyrrhizin"]),
    ("anemia", "D64", ["pallor", "dizziness", "koilonychia"], ["ferrous", "cyanocobalamin", "erythropoietin"]),
    ("migraine", "G43", ["aura", "nausea", "phonophobia"], ["sumatriptan", "rizatriptan", "lomerizine"]),
    ("epilepsy", "G40", ["seizure", "convulsion", "incontinence"], ["levetiracetam", "valproate", "lacosamide"]),
    ("bronchitis", "J40", ["rhonchi", "hoarseness", "expectoration"], ["carbocisteine", "ambroxol", "clarithromycin"]),
];

/// `(bullet, closing punctuation)` per hospital.
pub(crate) const HOSPITAL_STYLES: [(&str, &str); 5] = [("•", "。"), ("*", "."), ("-", "。"), ("■", "."), ("◆", "。")];

pub(crate) const HEADERS: [&str; 5] = ["course", "summary", "overview", "synopsis", "hospitalization"];

/// Upper bounds (inclusive) of the first four stay buckets; longer stays
/// fall in the last.
pub(crate) const STAY_BOUNDS: [u32; 4] = [3, 7, 14, 30];
pub(crate) const STAY_WORDS: [&str; 5] = ["brief", "short", "moderate", "long", "prolonged"];

pub(crate) const GENERAL_DRUGS: [&str; 8] = [
    "acetaminophen",
    "loxoprofen",
    "heparin",
    "furosemide",
    "insulin",
    "magnesium",
    "potassium",
    "saline",
];

pub(crate) const DOSES: [u32; 9] = [1, 2, 5, 10, 20, 40, 100, 200, 500];

pub(crate) const LABS: [&str; 10] = ["crp", "wbc", "hb", "plt", "alt", "ast", "bun", "cre", "alb", "ldh"];

pub(crate) const FILLERS: [&str; 16] = [
    "stable",
    "improved",
    "afebrile",
    "continued",
    "observed",
    "tolerated",
    "resting",
    "ambulating",
    "monitoring",
    "unchanged",
    "comfortable",
    "eating",
    "sleeping",
    "awake",
    "oriented",
    "discharged",
];

pub(crate) const DAY_WORD: &str = "day";
