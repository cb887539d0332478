"""
Report generation for LumiProbe metrics records
"""

import json
from pathlib import Path
from typing import List, Dict, Any, Optional
from datetime import datetime
import jinja2
import numpy as np

from .config import Config


def _format_value(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    return str(value).replace(" ", "_")


def format_record(record: Dict[str, Any]) -> str:
    """One line of space-separated key=value pairs"""
    return " ".join(f"{key}={_format_value(value)}" for key, value in record.items())


def parse_record(line: str) -> Dict[str, str]:
    return dict(token.split("=", 1) for token in line.split())


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


class ReportGenerator:
    """Write metrics records as key=value lines, JSON or HTML"""

    def __init__(self, config: Config, output_dir: Optional[str] = None):
        self.config = config
        self.output_dir = Path(output_dir or config.output_directory)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def write_records(self, records: List[Dict[str, Any]], filename: str = "metrics.txt") -> Path:
        """Line-oriented metrics file, one record per line"""
        output_file = self.output_dir / filename
        with open(output_file, 'w') as f:
            for record in records:
                f.write(format_record(record) + "\n")
        return output_file

    def generate_report(self, records: List[Dict[str, Any]], format_type: str, title: str = "LumiProbe") -> Path:
        """Generate report in specified format"""

        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")

        if format_type == 'kv':
            return self.write_records(records, f"lumiprobe_{timestamp}.txt")
        if format_type == 'json':
            return self._generate_json_report(records, timestamp)
        if format_type == 'html':
            return self._generate_html_report(records, timestamp, title)
        raise ValueError(f"unknown report format {format_type!r}")

    def _generate_json_report(self, records: List[Dict[str, Any]], timestamp: str) -> Path:
        report_data = {
            'timestamp': timestamp,
            'total_records': len(records),
            'records': [{k: _jsonable(v) for k, v in record.items()} for record in records],
        }

        output_file = self.output_dir / f"lumiprobe_{timestamp}.json"
        with open(output_file, 'w') as f:
            json.dump(report_data, f, indent=2, default=str)
        return output_file

    def _generate_html_report(self, records: List[Dict[str, Any]], timestamp: str, title: str) -> Path:
        template = self._get_html_template()

        report_data = {
            'title': title,
            'timestamp': timestamp,
            'total_records': len(records),
            'records': [{k: _format_value(v) for k, v in record.items()} for record in records],
        }

        output_file = self.output_dir / f"lumiprobe_{timestamp}.html"
        with open(output_file, 'w') as f:
            f.write(template.render(report_data))
        return output_file

    def _get_html_template(self) -> jinja2.Template:
        """Get HTML template for reports"""

        template_str = """
<!DOCTYPE html>
<html>
<head>
    <title>{{ title }} Report</title>
    <meta charset="UTF-8">
    <style>
        * { box-sizing: border-box; }
        body {
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif;
            margin: 0;
            padding: 20px;
            background: #f5f5f5;
            color: #333;
        }
        .container {
            max-width: 1000px;
            margin: 0 auto;
            background: white;
            border-radius: 10px;
            box-shadow: 0 2px 10px rgba(0,0,0,0.1);
            overflow: hidden;
        }
        .header {
            background: linear-gradient(135deg, #f6d365 0%, #fda085 100%);
            color: white;
            padding: 30px;
            text-align: center;
        }
        .header h1 { margin: 0 0 10px 0; font-size: 2.2em; }
        .records { padding: 20px; }
        .record {
            border: 1px solid #e9ecef;
            margin: 15px 0;
            padding: 15px 20px;
            border-radius: 10px;
        }
        .record h3 { margin: 0 0 10px 0; color: #495057; }
        .info-item {
            display: flex;
            justify-content: space-between;
            padding: 5px 0;
            border-bottom: 1px solid #e9ecef;
        }
        .info-label { font-weight: 500; color: #6c757d; }
        .info-value { font-family: monospace; color: #495057; }
        .footer {
            background: #f8f9fa;
            padding: 20px;
            text-align: center;
            color: #6c757d;
            border-top: 1px solid #dee2e6;
        }
    </style>
</head>
<body>
    <div class="container">
        <div class="header">
            <h1>{{ title }} Report</h1>
            <p>Generated: {{ timestamp }}</p>
            <p>{{ total_records }} records</p>
        </div>

        <div class="records">
            {% for record in records %}
            <div class="record">
                <h3>{{ record.get('record', 'record ' ~ loop.index) }}</h3>
                {% for key, value in record.items() if key != 'record' %}
                <div class="info-item">
                    <span class="info-label">{{ key }}</span>
                    <span class="info-value">{{ value }}</span>
                </div>
                {% endfor %}
            </div>
            {% endfor %}
        </div>

        <div class="footer">
            <p>Generated by LumiProbe</p>
        </div>
    </div>
</body>
</html>
        """

        return jinja2.Template(template_str)
