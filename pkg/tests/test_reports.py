# -*- coding: utf-8 -*-
import csv
import os
import unittest
import xml.etree.ElementTree as ET

from cameo.errors import MetricsError
from cameo.probe import PrecisionReport
from cameo.reports import (
    SUMMARY_COLUMNS,
    checkpoint_medians,
    cmd_report,
    is_monotone,
    read_metrics,
    write_metrics,
    write_report_csv,
)
from cameo.utils import dump_json
from . import temp_dir


def arm_rows(scale):
    return [
        dict(iter=i, loss_denoise=1.0 / i, loss_cameo=scale / i,
             precision_supervised_layer=(0.1 * i * scale if i % 2 == 0 else None))
        for i in range(1, 7)
    ]


def read_csv(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


class TestMetricsFiles(unittest.TestCase):

    def test_roundtrip(self):
        with temp_dir() as tmp:
            path = write_metrics(arm_rows(1.0), os.path.join(tmp, 'cameo.csv'))
            arms = read_metrics(path)
        self.assertEqual(list(arms), ['cameo'])
        rows = arms['cameo']
        self.assertEqual([r['iter'] for r in rows], list(range(1, 7)))
        self.assertIsNone(rows[0]['precision_supervised_layer'])
        self.assertAlmostEqual(rows[1]['precision_supervised_layer'], 0.2)

    def test_arm_column(self):
        with temp_dir() as tmp:
            path = os.path.join(tmp, 'm.csv')
            write_metrics(arm_rows(1.0), path, arm='baseline')
            self.assertEqual(read_csv(path)[0][0], 'arm')
            self.assertEqual(list(read_metrics(path)), ['baseline'])

    def test_malformed(self):
        with temp_dir() as tmp:
            path = os.path.join(tmp, 'm.csv')
            with self.assertRaises(MetricsError):
                read_metrics(path)
            with open(path, 'w') as f:
                f.write('')
            with self.assertRaises(MetricsError):
                read_metrics(path)
            with open(path, 'w') as f:
                f.write('iter,loss_denoise\n1,0.5\n')
            with self.assertRaises(MetricsError):
                read_metrics(path)
            with open(path, 'w') as f:
                f.write('iter,loss_denoise,loss_cameo,precision_supervised_layer\n'
                        '1,abc,0.1,\n')
            with self.assertRaises(MetricsError):
                read_metrics(path)


class TestReport(unittest.TestCase):

    def write_arms(self, tmp):
        paths = []
        for name, scale in (('baseline', 0.5), ('cameo', 1.0)):
            path = os.path.join(tmp, name + '.csv')
            write_metrics(arm_rows(scale), path)
            paths.append(path)
        return paths

    def test_empty_metrics_write_nothing(self):
        with temp_dir() as tmp:
            path = os.path.join(tmp, 'empty.csv')
            with open(path, 'w') as f:
                f.write('iter,loss_denoise,loss_cameo,precision_supervised_layer\n')
            out = os.path.join(tmp, 'report')
            with self.assertRaises(MetricsError):
                cmd_report([path], out)
            self.assertFalse(os.path.exists(out))
            with self.assertRaises(MetricsError):
                cmd_report([], out)

    def test_two_arms(self):
        '''Test SVGs parse, hold no external references and rerun identically'''

        with temp_dir() as tmp:
            paths = self.write_arms(tmp)
            report = os.path.join(tmp, 'probe.json')
            dump_json(dict(overall=0.5, per_bin={'0-30': 0.6, '30-60': 0.4}),
                      report)
            first = cmd_report(paths, os.path.join(tmp, 'a'), [report])
            second = cmd_report(paths, os.path.join(tmp, 'b'), [report])

            names = sorted(os.path.basename(p) for p in first)
            self.assertEqual(names, ['bins.svg', 'curves.svg', 'loss.svg',
                                     'precision.svg', 'summary.csv'])
            for a, b in zip(first, second):
                with open(a, 'rb') as fa, open(b, 'rb') as fb:
                    self.assertEqual(fa.read(), fb.read(), a)

            for path in first:
                if not path.endswith('.svg'):
                    continue
                root = ET.parse(path).getroot()
                self.assertTrue(root.tag.endswith('svg'))
                for node in root.iter():
                    for key, value in node.attrib.items():
                        if key.endswith('href'):
                            self.assertTrue(value.startswith('#'), value)

            summary = read_csv(os.path.join(tmp, 'a', 'summary.csv'))
        self.assertEqual(tuple(summary[0]), SUMMARY_COLUMNS)
        self.assertEqual([row[0] for row in summary[1:]], ['baseline', 'cameo'])
        cameo = dict(zip(summary[0], summary[2]))
        self.assertEqual(cameo['final_iter'], '6')
        self.assertAlmostEqual(float(cameo['precision_supervised_layer']), 0.6)
        self.assertAlmostEqual(float(cameo['best_precision']), 0.6)

    def test_duplicate_arm(self):
        with temp_dir() as tmp:
            paths = self.write_arms(tmp)
            with self.assertRaises(MetricsError):
                cmd_report([paths[0], paths[0]], os.path.join(tmp, 'out'))

    def test_labels(self):
        with temp_dir() as tmp:
            paths = self.write_arms(tmp)
            written = cmd_report(paths, os.path.join(tmp, 'out'),
                                 labels=['lam0', 'lam1'])
            summary = read_csv(written[-1])
        self.assertEqual([row[0] for row in summary[1:]], ['lam0', 'lam1'])

    def test_bad_report(self):
        with temp_dir() as tmp:
            paths = self.write_arms(tmp)
            bogus = os.path.join(tmp, 'bogus.json')
            dump_json(dict(overall=0.5), bogus)
            with self.assertRaises(MetricsError):
                cmd_report(paths, os.path.join(tmp, 'out'), [bogus])


class TestTables(unittest.TestCase):

    def test_report_csv(self):
        report = PrecisionReport(0.5, {'0-30': 0.75, '60-90': 0.25}, 0.02, 10,
                                 3, {'0-30': 2, '60-90': 1})
        with temp_dir() as tmp:
            rows = read_csv(write_report_csv(report, os.path.join(tmp, 'r.csv')))
        self.assertEqual(rows, [
            ['bin', 'precision', 'pairs'],
            ['0-30', '0.75', '2'],
            ['60-90', '0.25', '1'],
            ['overall', '0.5', '3'],
        ])

    def test_checkpoint_medians(self):
        medians = checkpoint_medians({10: [0.1, 0.9, 0.5], 0: [0.2, 0.4], 5: []})
        self.assertEqual(list(medians), [0, 10])
        self.assertAlmostEqual(medians[0], 0.3)
        self.assertAlmostEqual(medians[10], 0.5)

    def test_is_monotone(self):
        self.assertTrue(is_monotone([0.1, 0.2, 0.2, 0.5]))
        self.assertFalse(is_monotone([0.1, 0.3, 0.25]))
        self.assertTrue(is_monotone([0.1, 0.3, 0.25], slack=0.1))
        self.assertTrue(is_monotone([]))


if __name__ == '__main__':
    unittest.main()
