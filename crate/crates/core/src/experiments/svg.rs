//! Static SVG 1.1 bar charts with 95% CI whiskers.

use std::fmt::Write as _;

use super::report::MetricsReport;
use super::{environments, SPEAKERS};
use crate::scene::{Color, Shape, Word};

const PALETTE: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];

#[derive(Clone, Debug)]
pub struct Bar {
    pub mean: Option<f64>,
    pub ci: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Group {
    pub label: String,
    /// One bar per series, in series order.
    pub bars: Vec<Bar>,
}

#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub y_label: String,
    pub series: Vec<String>,
    pub groups: Vec<Group>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let (left, top, plot_h, bottom) = (60.0, 40.0, 240.0, 70.0);
        let bar_w = 22.0;
        let group_w = bar_w * self.series.len().max(1) as f64 + 24.0;
        let width = left + group_w * self.groups.len().max(1) as f64 + 20.0;
        let height = top + plot_h + bottom;
        let top_value = self
            .groups
            .iter()
            .flat_map(|g| &g.bars)
            .filter_map(|b| b.mean.map(|m| m + b.ci.unwrap_or(0.0)))
            .fold(0.0f64, f64::max);
        let y_max = if top_value <= 1.0 { 1.0 } else { top_value * 1.1 };
        let y = |v: f64| top + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, width / 2.0, esc(&self.title));
        for i in 0..=4 {
            let v = y_max * i as f64 / 4.0;
            let yy = y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
                width - 20.0,
                left - 4.0,
                yy + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            top + plot_h / 2.0,
            esc(&self.y_label)
        );
        for (gi, g) in self.groups.iter().enumerate() {
            let gx = left + 12.0 + gi as f64 * group_w;
            for (bi, b) in g.bars.iter().enumerate() {
                let x = gx + bi as f64 * bar_w;
                let color = PALETTE[bi % PALETTE.len()];
                match b.mean {
                    Some(m) => {
                        let _ = writeln!(
                            s,
                            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"/>"#,
                            y(m),
                            bar_w - 2.0,
                            y(0.0) - y(m)
                        );
                        if let Some(ci) = b.ci {
                            let cx = x + (bar_w - 2.0) / 2.0;
                            let (y0, y1) = (y(m - ci), y(m + ci));
                            let _ = writeln!(
                                s,
                                r#"<path d="M{cx:.1} {y0:.1}V{y1:.1}M{:.1} {y0:.1}h8M{:.1} {y1:.1}h8" stroke="black" fill="none"/>"#,
                                cx - 4.0,
                                cx - 4.0
                            );
                        }
                    }
                    None => {
                        let _ = writeln!(
                            s,
                            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#888">n/a</text>"##,
                            x + bar_w / 2.0,
                            y(0.0) - 4.0
                        );
                    }
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                gx + bar_w * g.bars.len() as f64 / 2.0,
                top + plot_h + 16.0,
                esc(&g.label)
            );
        }
        let _ = writeln!(s, r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, y(0.0), width - 20.0, y(0.0));
        for (i, name) in self.series.iter().enumerate() {
            let lx = left + i as f64 * 130.0;
            let ly = top + plot_h + 40.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
                ly - 9.0,
                PALETTE[i % PALETTE.len()],
                lx + 14.0,
                esc(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn bar(report: &MetricsReport, speaker: &str, condition: &str, metric: &str) -> Bar {
    match report.find(speaker, condition, metric) {
        Some(a) => Bar { mean: a.mean, ci: a.ci95 },
        None => Bar { mean: None, ci: None },
    }
}

fn env_label(env: &str, id: u8) -> String {
    match (id, env) {
        (3, "uniform") => "high salience".into(),
        (3, "low-salience") => "low salience".into(),
        _ => env.into(),
    }
}

/// The figure analogs for an experiment, as `(file name, chart)`.
pub fn figures(report: &MetricsReport) -> Vec<(String, Chart)> {
    let id = report.config.id;
    let envs = environments(id);
    let series: Vec<String> = SPEAKERS.iter().map(|s| s.to_string()).collect();
    let mut out = Vec::new();

    out.push((
        "overmodification.svg".to_string(),
        Chart {
            title: "Color overmodification in shape-needed games".into(),
            y_label: "overmodification rate".into(),
            series: series.clone(),
            groups: envs
                .iter()
                .map(|env| Group {
                    label: env_label(env, id),
                    bars: SPEAKERS
                        .iter()
                        .map(|sp| bar(report, sp, &format!("{env}:shape-needed"), "overmodification"))
                        .collect(),
                })
                .collect(),
        },
    ));

    for env in envs {
        out.push((
            format!("accuracy-{env}.svg"),
            Chart {
                title: format!("Communication accuracy ({})", env_label(env, id)),
                y_label: "accuracy".into(),
                series: series.clone(),
                groups: crate::scene::ContextCondition::ALL
                    .iter()
                    .map(|c| Group {
                        label: c.name().into(),
                        bars: SPEAKERS
                            .iter()
                            .map(|sp| bar(report, sp, &format!("{env}:{}", c.name()), "accuracy"))
                            .collect(),
                    })
                    .collect(),
            },
        ));
    }

    if id == 2 {
        for env in envs {
            out.push((
                format!("overmodification-circles-{env}.svg"),
                Chart {
                    title: format!("Overmodification on circle targets ({env})"),
                    y_label: "overmodification rate".into(),
                    series: series.clone(),
                    groups: ["red-circle", "non-red-circle"]
                        .iter()
                        .map(|scope| Group {
                            label: scope.replace('-', " "),
                            bars: SPEAKERS
                                .iter()
                                .map(|sp| bar(report, sp, &format!("{env}:shape-needed/{scope}"), "overmodification"))
                                .collect(),
                        })
                        .collect(),
                },
            ));
        }
        out.push((
            "applicability.svg".into(),
            Chart {
                title: "Applicability of \"circle\" by color".into(),
                y_label: "mean semantic value".into(),
                series: envs.iter().map(|e| e.to_string()).collect(),
                groups: Color::ALL
                    .iter()
                    .map(|c| Group {
                        label: c.name().into(),
                        bars: envs
                            .iter()
                            .map(|env| bar(report, "ensemble", &format!("{env}:circle/{}", c.name()), "applicability"))
                            .collect(),
                    })
                    .collect(),
            },
        ));
    }

    let features: Vec<Word> = Color::ALL
        .iter()
        .map(|&c| Word::Color(c))
        .chain(Shape::ALL.iter().map(|&s| Word::Shape(s)))
        .collect();
    out.push((
        "uncertainty.svg".into(),
        Chart {
            title: "Feature uncertainty of the internal listener".into(),
            y_label: "mean |L - truth|".into(),
            series: envs.iter().map(|e| env_label(e, id)).collect(),
            groups: features
                .iter()
                .map(|w| Group {
                    label: w.as_str().into(),
                    bars: envs
                        .iter()
                        .map(|env| bar(report, "ensemble", &format!("{env}:{}", w.as_str()), "uncertainty"))
                        .collect(),
                })
                .collect(),
        },
    ));
    out
}
