import base64
import io
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from PIL import Image

from layout_model import DataError, Layout, ObjectCondition
from evaluate_layouts import kde_density
from plan_rearrangement import plan
from render_svg import RenderSpec, heatmap_png, render_kde, render_layout, render_plan, svg_to_png, HAS_CAIROSVG

SVG = '{http://www.w3.org/2000/svg}'


def _scene(vocab):
    conditions = (
        ObjectCondition((0.34, 0.34), vocab.label('plate')),
        ObjectCondition((0.06, 0.36), vocab.label('fork')),
        ObjectCondition((0.14, 0.14), vocab.label('cup')),
    )
    return conditions, Layout(((0.0, -0.15), (0.35, -0.15), (-0.45, 0.3)))


def test_one_rect_per_object(dinner_vocab):
    conditions, layout = _scene(dinner_vocab)
    root = ET.fromstring(render_layout(conditions, layout, dinner_vocab))
    assert len(root.findall(f'.//{SVG}rect')) == 3
    labels = [t.text for t in root.findall(f'.//{SVG}text')]
    assert labels == ['0:plate', '1:fork', '2:cup']


def test_render_is_byte_deterministic(dinner_vocab):
    conditions, layout = _scene(dinner_vocab)
    assert render_layout(conditions, layout, dinner_vocab) == render_layout(conditions, layout, dinner_vocab)


def test_empty_scene_has_table_only(dinner_vocab):
    root = ET.fromstring(render_layout((), Layout(()), dinner_vocab))
    assert root.findall(f'.//{SVG}rect') == []
    assert len(root.findall(f'.//{SVG}path[@class="table"]')) == 1


def test_canvas_follows_table_aspect(dinner_vocab):
    root = ET.fromstring(render_layout((), Layout(()), dinner_vocab, RenderSpec(canvas=600)))
    assert (root.get('width'), root.get('height')) == ('600', '400')


def test_color_override(dinner_vocab):
    conditions, layout = _scene(dinner_vocab)
    svg = render_layout(conditions, layout, dinner_vocab, RenderSpec(colors={'fork': '#123456'}))
    assert len(re.findall('fill="#123456"', svg)) == 1


def test_invalid_spec():
    with pytest.raises(DataError, match='overlay'):
        RenderSpec(overlay='voronoi')
    with pytest.raises(DataError):
        RenderSpec(canvas=16)


def test_mismatched_layout(dinner_vocab):
    conditions, _ = _scene(dinner_vocab)
    with pytest.raises(DataError):
        render_layout(conditions, Layout(((0.0, 0.0),)), dinner_vocab)


def test_plan_arrows(dinner_vocab):
    conditions = (ObjectCondition((0.3, 0.3), dinner_vocab.label('plate')),
                  ObjectCondition((0.14, 0.14), dinner_vocab.label('cup')))
    initial = Layout(((0.5, 0.5), (0.0, 0.0)))
    result = plan(initial, Layout(((0.0, 0.0), (-0.5, -0.5))), conditions, dinner_vocab)
    root = ET.fromstring(render_plan(result, conditions, initial, dinner_vocab))
    lines = root.findall(f'.//{SVG}line')
    assert [line.get('class') for line in lines] == ['move-away', 'pick-place', 'pick-place']
    assert len(root.findall(f'.//{SVG}rect')) == 2


def test_kde_heatmap_embeds_png():
    grid = kde_density(np.random.default_rng(0).normal(0, 0.2, size=(100, 2)))
    root = ET.fromstring(render_kde(grid, RenderSpec(overlay='kde-heatmap'), label='Plate2Fork'))
    image = root.find(f'.//{SVG}image')
    href = image.get('href')
    assert href.startswith('data:image/png;base64,')
    png = Image.open(io.BytesIO(base64.b64decode(href.split(',', 1)[1])))
    assert png.size == (64, 64)


def test_heatmap_peak_is_red():
    density = np.zeros((8, 8))
    density[0, 0] = 1.0
    png = Image.open(io.BytesIO(heatmap_png(density))).convert('RGB')
    # row 0 is the lowest y, drawn at the bottom
    assert png.getpixel((0, 7)) == (255, 0, 0)
    assert png.getpixel((5, 5)) == (255, 255, 255)


@pytest.mark.skipif(HAS_CAIROSVG, reason='cairosvg installed')
def test_png_needs_cairosvg(tmp_path, dinner_vocab):
    with pytest.raises(DataError, match='cairosvg'):
        svg_to_png(render_layout((), Layout(()), dinner_vocab), tmp_path / 'out.png')
