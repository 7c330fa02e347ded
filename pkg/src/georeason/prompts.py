"""Default prompt templates for the three model roles.

Templates keep their leading ``<image>`` marker; the image itself travels as
a separate message part, so the marker is stripped when rendering.
"""

from __future__ import annotations

IMAGE_MARKER = "<image>"
INFO_MARKER = "<information>"
ITEM_SLOT = "{item}"

REASONER = (
    "<image> Given an image, craft a brief and cohesive reasoning path that deduces this location based on the "
    "visual clues present in the image. Using a tone of exploration and inference. Carefully analyze and link "
    "observations of natural features (climate, vegetation, terrain), man-made structures (roads, buildings, "
    "signage), and distinct landmarks. Allow these observations to naturally lead you to the correct country, "
    "enhancing the accuracy of your deductions. Start the reasoning without any intro, and make sure to make it "
    "brief."
)

SEARCHER = (
    "<image> Analyze the {item} images to determine the region with the highest likelihood of finding this type of "
    "{item}. For each image, provide only the core reasoning in one sentence. Don't say you can't determine, try "
    "your best as it's a geo-localization game"
)

GUESSER = (
    "<image> <information> Using the provided information as a reference, estimate the location depicted in the "
    "image with as much accuracy and precision as possible. Generally, you might use the reasoning to roughly "
    "locate the coarse-grained location, and use other information to help you decide more precisely. Use your own "
    "knowledge as well. Aim to deduce the exact coordinates whenever feasible. Format your response strictly as JSON "
    'in the following structure:{"country": "<country_name>", "city": "<city_name>", "latitude": <Latitude '
    'Coordinate>, "longitude": <Longitude Coordinate>} Ensure the JSON output is correctly formatted. Provide a '
    "well-informed estimate for each value, avoiding any empty fields. Do not include additional information or "
    "commentary."
)

FORMAT_REMINDER = (
    "Your previous answer could not be parsed. Reply with only one JSON object with the keys "
    '"country", "city", "latitude" and "longitude"; latitude must be within [-90, 90] and longitude within '
    "[-180, 180]."
)


def _strip_image(template: str) -> str:
    text = template.strip()
    if text.startswith(IMAGE_MARKER):
        text = text[len(IMAGE_MARKER) :].lstrip()
    return text


def render_reasoner(template: str) -> str:
    return _strip_image(template)


def render_searcher(template: str, item: str) -> str:
    # str.replace, not format(): templates may contain literal braces
    return _strip_image(template).replace(ITEM_SLOT, item)


def render_guesser(template: str, information: str) -> str:
    text = _strip_image(template)
    if information:
        return text.replace(INFO_MARKER, information, 1)
    return text.replace(INFO_MARKER, "", 1).lstrip()
