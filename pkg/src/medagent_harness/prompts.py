"""Prompt templates for every pipeline role, rendered with Jinja2.

Templates are versioned as a whole: bump ``PROMPT_VERSION`` whenever wording
changes so that stored transcripts can be matched to the prompts that produced them.
"""

from __future__ import annotations

from typing import Any

import jinja2

PROMPT_VERSION = "1"

_TEMPLATES: dict[str, str] = {
    # Chain-of-diagnosis ranking
    "cod_rank": """\
The patient describes the following symptoms:
{{ symptoms }}

Candidate diseases:
{% for option in options %}{{ option.letter }}) {{ option.name }}\
{% if option.description %}: {{ option.description }}{% endif %}
{% endfor %}
Work through the diagnosis step by step: summarize the symptoms, relate each candidate \
to them, then rank the candidates from most to least likely.
Finish with the letter of the most likely disease in the form "Answer: <letter>".""",
    # Multi-expert consultation
    "medagents_gather_system": """\
You are a medical expert who assembles a consultation team for a clinical question.""",
    "medagents_gather": """\
Question:
{{ question }}

Options:
{{ options }}

List exactly five medical specialties whose experts are most relevant to this question.
Write one specialty per line in the form "Specialty: short description of the expertise".""",
    "medagents_gather_retry": """\
Your previous answer named {{ found }} distinct specialties{% if names %} ({{ names }}){% endif %}.
List exactly five distinct specialties, one per line, in the form \
"Specialty: short description of the expertise".""",
    "medagents_expert_system": """\
You are a medical expert in {{ name }}.{% if description %} {{ description }}{% endif %}""",
    "medagents_analyze": """\
Question:
{{ question }}

Options:
{{ options }}

From the perspective of your specialty, interpret the patient's condition, point out \
the findings that matter most, and discuss which options are consistent with them.""",
    "medagents_summarize": """\
Question:
{{ question }}

Options:
{{ options }}

Five experts analysed this question:
{% for analysis in analyses %}
[{{ analysis.name }} Expert]
{{ analysis.text }}
{% endfor %}
Combine these analyses into one report. Keep the key medical knowledge and the overall \
reasoning, and resolve points where the experts disagree.""",
    "medagents_vote": """\
Question:
{{ question }}

Options:
{{ options }}

Summary report:
{{ report }}

Do you agree with the report? Start your reply with "yes" or "no", then give one \
sentence of reasoning.""",
    "medagents_refine": """\
Question:
{{ question }}

Options:
{{ options }}

Summary report:
{{ report }}

You disagree with this report. Revise it using your expertise and reply with the \
full revised report only.""",
    "medagents_decide": """\
Question:
{{ question }}

Options:
{{ options }}

Agreed report:
{{ report }}

Based on the report, choose the single correct option. Reply in the form \
"Answer: <letter>" followed by a short justification.""",
    # Simulated clinical encounter
    "agentclinic_doctor_system": """\
You are a doctor named Dr. Agent who only responds in the form of dialogue. You are \
examining a patient and will ask questions to understand their disease. You may take \
{{ max_turns }} turns in total before you must decide, and you have used {{ turns_used }}.
You may request test results by writing "REQUEST TEST: [test]", for example \
"REQUEST TEST: Chest_X-Ray". When you are ready, write \
"DIAGNOSIS READY: [diagnosis here]". Reply with one or two sentences.""",
    "agentclinic_doctor": """\
{% if dialogue %}Dialogue so far:
{{ dialogue }}

Continue the consultation as the doctor.{% else %}\
The patient has just entered the room. Begin the consultation as the doctor.{% endif %}""",
    "agentclinic_doctor_final": """\
Dialogue so far:
{{ dialogue }}

You have used all of your turns. Give your most likely diagnosis now in the form \
"DIAGNOSIS READY: [diagnosis here]".""",
    "agentclinic_patient_system": """\
You are a patient in a clinic who only responds in the form of dialogue. A doctor is \
examining you and will ask questions. Describe only your symptoms, history and \
background. You do not know your diagnosis, so never name one. Reply with one or two \
sentences.
Everything you know about yourself:
{{ profile }}""",
    "agentclinic_patient": """\
{% if dialogue %}Dialogue so far:
{{ dialogue }}

{% endif %}The doctor says: {{ question }}
Answer as the patient.""",
    "agentclinic_measurement_system": """\
You are a measurement reader who reports medical test results in the form \
"RESULTS: [results here]".
Recorded results for this patient:
{% for name, result in tests %}{{ name }}: {{ result }}
{% else %}(none)
{% endfor %}\
If the requested test is not among the recorded results, reply exactly \
"RESULTS: NORMAL READINGS".""",
    "agentclinic_measurement": """\
The doctor requested: {{ test }}""",
    "agentclinic_moderator": """\
Here is the correct diagnosis: {{ gold }}
Here is the doctor's diagnosis: {{ declared }}
Are these the same disease, even if worded differently? Answer only "Yes" or "No".""",
}

_ENV = jinja2.Environment(  # noqa: S701 - prompts are plain text, not HTML
    loader=jinja2.DictLoader(_TEMPLATES),
    undefined=jinja2.StrictUndefined,
    keep_trailing_newline=False,
    autoescape=False,
)


def template_names() -> list[str]:
    """Names of all registered templates."""
    return sorted(_TEMPLATES)


def render(name: str, /, **context: Any) -> str:
    """Render template ``name``; a missing variable raises ``jinja2.UndefinedError``."""
    return _ENV.get_template(name).render(**context)
