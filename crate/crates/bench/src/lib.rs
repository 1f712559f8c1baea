//! Shared inputs for the benchmarks.

use sqlqe_core::db::{QueryResult, Value};

/// Model replies exercising each parser strategy.
pub const REPLIES: [&str; 5] = [
    r#"{"description":"Orders per customer.","query":"SELECT customer_id, count(*) FROM orders GROUP BY 1"}"#,
    "Here it is: {\"query\": \"SELECT id FROM customers WHERE country = 'DE'\"} hope that helps",
    "<think>join orders to customers</think>\n```sql\nSELECT c.name, sum(o.total) FROM customers c JOIN orders o ON o.customer_id = c.id GROUP BY c.name\n```",
    "The answer is SELECT name FROM products ORDER BY price DESC LIMIT 3; enjoy",
    "TABLE orders",
];

/// SQLite statements that exercise most rewrite rules.
pub const SQLITE: [&str; 4] = [
    "SELECT IFNULL(name, '?'), SUBSTR(name, 1, 3) FROM users WHERE active = 1 LIMIT 5, 10",
    "SELECT strftime('%Y', created) AS y, GROUP_CONCAT(name) FROM users GROUP BY y",
    "SELECT CAST(score AS REAL) / 2, `name` FROM users WHERE name = \"bob\"",
    "SELECT DATETIME('now'), RANDOM() FROM users",
];

/// A result of `n` mixed-type rows.
pub fn result(n: usize) -> QueryResult {
    QueryResult {
        columns: vec!["id".into(), "name".into(), "amount".into(), "note".into()],
        rows: (0..n)
            .map(|i| {
                vec![
                    Value::Int(i as i64),
                    Value::Text(format!("  Customer {i} ")),
                    Value::Decimal(format!("{}.{:03}", i * 7, i % 1000)),
                    if i % 5 == 0 { Value::Null } else { Value::Float(i as f64 / 3.0) },
                ]
            })
            .collect(),
        truncated: false,
    }
}
