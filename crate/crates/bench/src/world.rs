//! Seeded synthetic corpus: linked company, subsidiary, case, court and
//! region tables, a legal knowledge base, distractor tools, and multi-hop
//! tasks whose answers follow the join chain.

use std::collections::{BTreeMap, BTreeSet};

use poact_core::executor::{TableMatch, TableTool};
use poact_core::rag::{FewShotExample, ToolSpec};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const MAX_HOPS: usize = 5;
pub const TASK_MULTI_HOP: &str = "multi_hop";
pub const TASK_KNOWLEDGE: &str = "knowledge";
pub const KNOWLEDGE_TOOL: &str = "search_legal_knowledge";

/// The join chain, in hop order, with the key each tool is looked up by and
/// the field of its row that feeds the next hop.
pub const CHAIN: [(&str, &str, &str); MAX_HOPS] = [
    ("get_company_info", "company_name", "subsidiary"),
    ("get_subcompany_info", "subcompany_name", "case_number"),
    ("get_legal_document", "case_number", "court_name"),
    ("get_court_info", "court_name", "region"),
    ("get_court_code", "region", "court_code"),
];

/// Field asked about by a task of each hop count.
const ANSWER_FIELD: [&str; MAX_HOPS] = [
    "legal_representative",
    "legal_representative",
    "court_name",
    "address",
    "court_code",
];

/// One tool call in a task's reference solution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceCall {
    pub tool: String,
    pub argument: String,
    /// Field of the result used by the next call, or holding the answer.
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub id: String,
    pub query: String,
    pub expected_keywords: Vec<String>,
    pub hops: u8,
    pub task_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ground_truth_trace: Vec<TraceCall>,
}

impl SyntheticTask {
    pub fn is_knowledge(&self) -> bool {
        self.task_type == TASK_KNOWLEDGE
    }
}

/// Number of tasks to generate per hop count (index 0 is 1-hop) plus
/// knowledge tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub per_hop: [usize; MAX_HOPS],
    pub knowledge: usize,
}

impl Default for TaskCounts {
    fn default() -> Self {
        Self {
            per_hop: [4, 4, 4, 4, 4],
            knowledge: 4,
        }
    }
}

impl TaskCounts {
    pub fn total(&self) -> usize {
        self.per_hop.iter().sum::<usize>() + self.knowledge
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    pub tools: Vec<TableTool>,
    pub few_shots: Vec<FewShotExample>,
    pub companies: Vec<String>,
    pub topics: Vec<String>,
}

impl World {
    pub fn tool_specs(&self) -> Vec<ToolSpec> {
        self.tools.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn table(&self, tool: &str) -> Option<&TableTool> {
        self.tools.iter().find(|t| t.spec.name == tool)
    }

    /// Runs a trace against the tables, returning each call's result.
    pub fn replay(&self, trace: &[TraceCall]) -> Result<Vec<Value>, String> {
        trace
            .iter()
            .map(|c| {
                self.table(&c.tool)
                    .ok_or_else(|| format!("unknown tool {}", c.tool))?
                    .lookup(&c.argument)
            })
            .collect()
    }
}

const PREFIXES: [&str; 24] = [
    "Huaxin", "Jinlong", "Ruifeng", "Tianhe", "Boyuan", "Xinda", "Hengtai", "Zhongke", "Lianyi", "Guorui",
    "Minsheng", "Kaiyuan", "Shengda", "Yongfeng", "Haitong", "Dingxin", "Anping", "Baocheng", "Changrong",
    "Dongfang", "Fuxing", "Guanghua", "Hongyu", "Jiahe",
];
const INDUSTRIES: [&str; 10] = [
    "Trading", "Logistics", "Pharmaceutical", "Software", "Textile", "Construction", "Energy", "Food", "Media",
    "Machinery",
];
const SURNAMES: [&str; 16] = [
    "Wang", "Li", "Zhang", "Liu", "Chen", "Yang", "Zhao", "Huang", "Zhou", "Wu", "Xu", "Sun", "Hu", "Zhu", "Gao",
    "Lin",
];
const GIVEN: [&str; 16] = [
    "Wei", "Fang", "Min", "Jing", "Lei", "Qiang", "Yan", "Jun", "Tao", "Ping", "Hui", "Ning", "Bo", "Xia", "Gang",
    "Lan",
];
const CITIES: [&str; 8] = ["Beijing", "Shanghai", "Hangzhou", "Chengdu", "Wuhan", "Nanjing", "Xiamen", "Tianjin"];
const DISTRICTS: [&str; 8] = ["Haidian", "Xuhui", "Binjiang", "Jinjiang", "Jianghan", "Gulou", "Siming", "Hexi"];
const STREETS: [&str; 8] = ["Zhongshan", "Renmin", "Jiefang", "Heping", "Xinhua", "Wenhua", "Changjiang", "Huaihai"];
const CASE_KINDS: [&str; 4] = ["contract dispute", "loan dispute", "labour dispute", "trademark infringement"];

const TOPICS: [(&str, &str); 10] = [
    ("appeal against a civil judgment", "an appeal must be filed"),
    ("objection to a payment order", "a written objection must be raised"),
    ("labour arbitration claim", "the claim must be brought"),
    ("retrial application", "the application must be made"),
    ("administrative reconsideration", "the request must be submitted"),
    ("product quality complaint", "the complaint must be lodged"),
    ("contract rescission notice", "the other party may object"),
    ("enforcement application", "the application must be filed"),
    ("trademark opposition", "an opposition must be lodged"),
    ("consumer return request", "goods may be returned"),
];
const PERIODS: [&str; 8] = [
    "within 10 days",
    "within 15 days",
    "within 30 days",
    "within 60 days",
    "within 3 months",
    "within 6 months",
    "within 1 year",
    "within 2 years",
];

const DISTRACTORS: [(&str, &str); 30] = [
    ("get_patent_info", "patents held by a company: patent number, title and filing date"),
    ("get_trademark_info", "registered trademarks of a company and their classes"),
    ("get_tax_record", "tax payment records and tax credit grade of a company"),
    ("get_bond_info", "bonds issued by a company with coupon and maturity"),
    ("get_shareholder_info", "shareholders of a company and their stakes"),
    ("get_employee_count", "number of insured employees of a company"),
    ("get_branch_office", "branch offices of a company and their addresses"),
    ("get_bank_account", "the basic bank account of a company"),
    ("get_lawyer_info", "practising lawyers and the firm they belong to"),
    ("get_law_firm_info", "law firms, their partners and licence numbers"),
    ("get_arbitration_record", "arbitration awards involving a company"),
    ("get_bankruptcy_record", "bankruptcy and restructuring filings of a company"),
    ("get_land_use_right", "land use rights owned by a company"),
    ("get_environmental_penalty", "environmental protection penalties issued to a company"),
    ("get_customs_record", "customs registration and import export status of a company"),
    ("get_import_license", "import licences granted to a company"),
    ("get_product_recall", "product recalls announced by a company"),
    ("get_insurance_policy", "insurance policies bought by a company"),
    ("get_credit_rating", "credit rating of a company from rating agencies"),
    ("get_audit_report", "annual audit reports and the auditing firm of a company"),
    ("get_stock_pledge", "pledges of listed shares held by a company"),
    ("get_equity_freeze", "frozen equity of a company and the freezing authority"),
    ("get_dishonest_debtor", "whether a company is listed as a dishonest judgment debtor"),
    ("get_consumption_restriction", "high consumption restriction orders against a company"),
    ("get_administrative_license", "administrative licences held by a company"),
    ("get_industrial_park", "industrial parks and the companies located in them"),
    ("get_university_info", "universities, their founding year and location"),
    ("get_hospital_info", "hospitals, their grade and location"),
    ("get_weather", "the current weather of a city"),
    ("get_exchange_rate", "the exchange rate between two currencies"),
];

fn spec(name: &str, description: &str, input_example: &str, output_example: &str) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        description: description.into(),
        input_example: input_example.into(),
        output_example: output_example.into(),
        callable_id: name.into(),
        embedding: None,
    }
}

fn table_tool(spec: ToolSpec, key_param: &str, matching: TableMatch, table: BTreeMap<String, Value>) -> TableTool {
    TableTool {
        spec,
        key_param: key_param.into(),
        matching,
        table,
    }
}

/// Draws `n` distinct strings from `make`.
fn distinct(rng: &mut ChaCha8Rng, n: usize, mut make: impl FnMut(&mut ChaCha8Rng) -> String) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = make(rng);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn person(rng: &mut ChaCha8Rng) -> String {
    format!("{} {}", SURNAMES.choose(rng).unwrap(), GIVEN.choose(rng).unwrap())
}

/// Builds the corpus and tasks for a seed. Same seed, same output.
pub fn generate(seed: u64, counts: TaskCounts) -> (World, Vec<SyntheticTask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = counts.per_hop.iter().sum::<usize>().max(8);

    let companies = distinct(&mut rng, n, |r| {
        format!("{} {} Ltd", PREFIXES.choose(r).unwrap(), INDUSTRIES.choose(r).unwrap())
    });
    let subsidiaries = distinct(&mut rng, n, |r| {
        format!(
            "{} {} {} Subsidiary",
            PREFIXES.choose(r).unwrap(),
            CITIES.choose(r).unwrap(),
            INDUSTRIES.choose(r).unwrap()
        )
    });
    let cases = distinct(&mut rng, n, |r| format!("Case {}-{:05}", r.random_range(2015..2024), r.random_range(0..100_000)));
    let n_courts = (n / 2).max(4);
    let courts = distinct(&mut rng, n_courts, |r| {
        format!("{} {} District Court", CITIES.choose(r).unwrap(), DISTRICTS.choose(r).unwrap())
    });
    let regions = distinct(&mut rng, n_courts, |r| format!("Region {}", r.random_range(100..1000)));

    let mut company_rows = BTreeMap::new();
    let mut sub_rows = BTreeMap::new();
    let mut case_rows = BTreeMap::new();
    for i in 0..n {
        let court = courts.choose(&mut rng).unwrap();
        company_rows.insert(
            companies[i].clone(),
            json!({
                "company_name": companies[i],
                "legal_representative": person(&mut rng),
                "registered_capital": format!("{} million yuan", rng.random_range(1..500)),
                "industry": companies[i].split(' ').nth(1).unwrap_or_default(),
                "subsidiary": subsidiaries[i],
            }),
        );
        sub_rows.insert(
            subsidiaries[i].clone(),
            json!({
                "subcompany_name": subsidiaries[i],
                "parent_company": companies[i],
                "legal_representative": person(&mut rng),
                "case_number": cases[i],
            }),
        );
        case_rows.insert(
            cases[i].clone(),
            json!({
                "case_number": cases[i],
                "title": format!("{} between {} and {}", CASE_KINDS.choose(&mut rng).unwrap(), subsidiaries[i], person(&mut rng)),
                "court_name": court,
                "verdict": format!("the defendant pays {} yuan", rng.random_range(1_000..900_000)),
            }),
        );
    }
    let mut court_rows = BTreeMap::new();
    let mut region_rows = BTreeMap::new();
    for (court, region) in courts.iter().zip(&regions) {
        court_rows.insert(
            court.clone(),
            json!({
                "court_name": court,
                "address": format!("{} {} Road {}", rng.random_range(1..300), STREETS.choose(&mut rng).unwrap(), court.split(' ').next().unwrap()),
                "region": region,
            }),
        );
        region_rows.insert(
            region.clone(),
            json!({
                "region": region,
                "court_code": format!("C{}", rng.random_range(1000..10000)),
            }),
        );
    }
    let mut knowledge_rows = BTreeMap::new();
    let mut topic_periods = Vec::new();
    for (topic, clause) in TOPICS {
        let period = *PERIODS.choose(&mut rng).unwrap();
        knowledge_rows.insert(
            topic.to_string(),
            json!({"topic": topic, "text": format!("For a {topic}, {clause} {period}.")}),
        );
        topic_periods.push((topic.to_string(), period.to_string()));
    }

    let first_company = &companies[0];
    let first_row = &company_rows[first_company];
    let mut tools = vec![
        table_tool(
            spec(
                CHAIN[0].0,
                "Look up the registration record of a company by its full company name. Returns the legal representative, registered capital, industry and the name of its subsidiary.",
                &format!("get_company_info(\"{first_company}\")"),
                &first_row.to_string(),
            ),
            CHAIN[0].1,
            TableMatch::Exact,
            company_rows.clone(),
        ),
        table_tool(
            spec(
                CHAIN[1].0,
                "Look up a subsidiary company by its subcompany name. Returns the parent company, the legal representative of the subsidiary and the case number of its court case.",
                &format!("get_subcompany_info(\"{}\")", subsidiaries[0]),
                &sub_rows[&subsidiaries[0]].to_string(),
            ),
            CHAIN[1].1,
            TableMatch::Exact,
            sub_rows,
        ),
        table_tool(
            spec(
                CHAIN[2].0,
                "Look up a legal document (judgment) by its case number. Returns the case title, the name of the court that handled the case and the verdict.",
                &format!("get_legal_document(\"{}\")", cases[0]),
                &case_rows[&cases[0]].to_string(),
            ),
            CHAIN[2].1,
            TableMatch::Exact,
            case_rows,
        ),
        table_tool(
            spec(
                CHAIN[3].0,
                "Look up a court by its court name. Returns the court address and the region the court belongs to.",
                &format!("get_court_info(\"{}\")", courts[0]),
                &court_rows[&courts[0]].to_string(),
            ),
            CHAIN[3].1,
            TableMatch::Exact,
            court_rows,
        ),
        table_tool(
            spec(
                CHAIN[4].0,
                "Look up the court code of a court region by the region name.",
                &format!("get_court_code(\"{}\")", regions[0]),
                &region_rows[&regions[0]].to_string(),
            ),
            CHAIN[4].1,
            TableMatch::Exact,
            region_rows,
        ),
        table_tool(
            spec(
                KNOWLEDGE_TOOL,
                "Search the legal knowledge base for rules and time limits on a legal topic. Returns matching passages with their text.",
                &format!("search_legal_knowledge(\"{}\")", TOPICS[0].0),
                &json!([knowledge_rows[TOPICS[0].0]]).to_string(),
            ),
            "query",
            TableMatch::Search,
            knowledge_rows,
        ),
    ];
    for (name, what) in DISTRACTORS {
        let mut table = BTreeMap::new();
        for c in companies.iter().take(3) {
            table.insert(c.clone(), json!({"company_name": c, "record": format!("{what} on file"), "count": rng.random_range(0..20)}));
        }
        let example = table.values().next().cloned().unwrap_or(Value::Null);
        tools.push(table_tool(
            spec(
                name,
                &format!("Look up {what}."),
                &format!("{name}(\"{first_company}\")"),
                &example.to_string(),
            ),
            "name",
            TableMatch::Exact,
            table,
        ));
    }

    let few_shots = few_shot_examples();

    let mut tasks = Vec::new();
    for (h, &count) in counts.per_hop.iter().enumerate() {
        let hops = h + 1;
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(&mut rng);
        for (j, &ci) in pool.iter().cycle().take(count).enumerate() {
            let company = &companies[ci];
            let mut trace = Vec::new();
            let mut key = company.clone();
            for (step, (tool, _, next_field)) in CHAIN.iter().take(hops).enumerate() {
                let field = if step + 1 == hops { ANSWER_FIELD[h] } else { next_field };
                trace.push(TraceCall {
                    tool: tool.to_string(),
                    argument: key.clone(),
                    field: field.to_string(),
                });
                if step + 1 < hops {
                    key = lookup_field(&tools, tool, &key, next_field);
                }
            }
            let last = trace.last().unwrap();
            let keyword = lookup_field(&tools, &last.tool, &last.argument, &last.field);
            tasks.push(SyntheticTask {
                id: format!("hop{hops}-{j:03}"),
                query: hop_query(hops, company),
                expected_keywords: vec![keyword],
                hops: hops as u8,
                task_type: TASK_MULTI_HOP.into(),
                ground_truth_trace: trace,
            });
        }
    }
    let mut order: Vec<usize> = (0..topic_periods.len()).collect();
    order.shuffle(&mut rng);
    for (j, &ti) in order.iter().cycle().take(counts.knowledge).enumerate() {
        let (topic, period) = &topic_periods[ti];
        tasks.push(SyntheticTask {
            id: format!("knowledge-{j:03}"),
            query: format!("According to the legal knowledge base, what is the time limit for a {topic}?"),
            expected_keywords: vec![period.clone()],
            hops: 1,
            task_type: TASK_KNOWLEDGE.into(),
            ground_truth_trace: vec![TraceCall {
                tool: KNOWLEDGE_TOOL.into(),
                argument: topic.clone(),
                field: "text".into(),
            }],
        });
    }

    let world = World {
        seed,
        tools,
        few_shots,
        companies,
        topics: topic_periods.into_iter().map(|(t, _)| t).collect(),
    };
    (world, tasks)
}

fn lookup_field(tools: &[TableTool], tool: &str, key: &str, field: &str) -> String {
    let row = tools
        .iter()
        .find(|t| t.spec.name == tool)
        .and_then(|t| t.table.get(key))
        .unwrap_or_else(|| panic!("generator row missing: {tool}({key})"));
    row[field].as_str().unwrap_or_default().to_string()
}

pub fn hop_query(hops: usize, company: &str) -> String {
    match hops {
        1 => format!("Who is the legal representative of {company}?"),
        2 => format!("Who is the legal representative of the subsidiary of {company}?"),
        3 => format!("Which court handled the case of the subsidiary of {company}?"),
        4 => format!("What is the address of the court that handled the case of the subsidiary of {company}?"),
        _ => format!(
            "What is the court code of the region of the court that handled the case of the subsidiary of {company}?"
        ),
    }
}

fn few_shot_examples() -> Vec<FewShotExample> {
    let shot = |task_type: &str, content: &str| FewShotExample {
        task_type: task_type.into(),
        content: content.into(),
        embedding: None,
    };
    vec![
        shot(
            "company lookup",
            "Query: Who is the legal representative of Example Trading Ltd?\n\
             Plan: 1. Use get_company_info to look up Example Trading Ltd.\n\
             Thought: Look up the company record with get_company_info.\n\
             Code: info = get_company_info(\"Example Trading Ltd\")\nprint(info)\n\
             Thought: The record holds the legal representative; return it.\n\
             Code: final_answer(info[\"legal_representative\"])",
        ),
        shot(
            "subsidiary lookup",
            "Query: Who is the legal representative of the subsidiary of Example Media Ltd?\n\
             Plan: 1. Use get_company_info to find the subsidiary. 2. Use get_subcompany_info on that subsidiary.\n\
             Thought: Find the subsidiary name with get_company_info.\n\
             Code: info = get_company_info(\"Example Media Ltd\")\nprint(info[\"subsidiary\"])\n\
             Thought: Look up the subsidiary with get_subcompany_info.\n\
             Code: sub = get_subcompany_info(info[\"subsidiary\"])\nprint(sub)",
        ),
        shot(
            "case lookup",
            "Query: Which court handled the case of the subsidiary of Example Food Ltd?\n\
             Plan: 1. get_company_info for the subsidiary. 2. get_subcompany_info for the case number. 3. get_legal_document for the court name.\n\
             Thought: Read the judgment with get_legal_document using the case number.\n\
             Code: doc = get_legal_document(sub[\"case_number\"])\nprint(doc[\"court_name\"])",
        ),
        shot(
            "court lookup",
            "Query: What is the address of the court that handled a case?\n\
             Thought: Look up the court by name with get_court_info.\n\
             Code: court = get_court_info(doc[\"court_name\"])\nprint(court[\"address\"])",
        ),
        shot(
            "court code lookup",
            "Query: What is the court code of the region of a court?\n\
             Thought: Look up the region of the court with get_court_code.\n\
             Code: code = get_court_code(court[\"region\"])\nfinal_answer(code[\"court_code\"])",
        ),
        shot(
            "legal knowledge",
            "Query: According to the legal knowledge base, what is the time limit for a tenancy dispute?\n\
             Plan: 1. Use search_legal_knowledge to find the rule.\n\
             Thought: Search the knowledge base with search_legal_knowledge.\n\
             Code: hits = search_legal_knowledge(\"tenancy dispute\")\nprint(hits)\n\
             Thought: The first passage states the time limit.\n\
             Code: final_answer(hits[0][\"text\"])",
        ),
        shot(
            "patent lookup",
            "Query: How many patents does Example Software Ltd hold?\n\
             Thought: Use get_patent_info for the company.\n\
             Code: p = get_patent_info(\"Example Software Ltd\")\nprint(p)",
        ),
        shot(
            "error recovery",
            "Thought: The last call failed because the name was misspelled; use the exact name printed earlier.\n\
             Code: info = get_company_info(name)\nprint(info)",
        ),
    ]
}
