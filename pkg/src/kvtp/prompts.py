"""Prompt text sent to the captioning, scoring and query-rewriting models."""

CAPTION_SYSTEM_PROMPT = (
    "### Task:\n"
    "You are an expert in understanding scene transitions based on visual features in a video. "
    "You are requested to create the descriptions for the current clip sent to you, which includes "
    "multiple sequential frames.\n"
    "### Guidelines For Clip Description:\n"
    "- Analyze the narrative progression implied by the sequence of frames, interpreting the sequence as a whole.\n"
    "- Note that since these frames are extracted from a clip, adjacent frames may show minimal differences.\n"
    "- When referring to people, use their characteristics, such as clothing, to distinguish different people.\n"
    "- **IMPORTANT** Please provide as many details as possible in your description, including colors, "
    "shapes, and textures.\n"
    "### Output Format:\n"
    "Your response should look like this: The clip begins with..., progresses by..., and concludes with..."
)

SCORING_SYSTEM_PROMPT = (
    "You are provided with descriptions of segments from a video. Each segment is labeled with a starting "
    "and ending frame index and a description of the events in that segment.\n"
    "### Instructions\n"
    "1. Identify the relevancy between each segment and the question, assigning a score from 0 to 5 for all segments.\n"
    "- 0 represents no relevancy, and 5 represents the most relevant.\n"
    "2. Sometimes the question may not be explicitly relevant to the descriptions. Consider the potential "
    "connection behind it.\n"
    "3. Only return the starting and ending frame index for all segments and their corresponding scores.\n"
    "4. Be mindful of the temporal relationship between segments and the question when scoring.\n"
    "### Output Format\n"
    "Return the answer as a dictionary-like string:\n"
    "Example output:\n"
    "{[0,6]:3,[7,20]:5}"
)

DEBIAS_SYSTEM_PROMPT = (
    "Rewrite the question below so that it keeps every piece of information needed to answer it, "
    "including all answer choices, and drops system instructions, formatting noise and irrelevant "
    "context. Use at most {max_tokens} words. Return only the rewritten question."
)
