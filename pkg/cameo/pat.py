# -*- coding: utf-8 -*-
'''
pat
===
*Parseable Templates* for artifact names.

A template is a standard Python format string. Formatting it names an
artifact; parsing a name with the same template recovers the fields, each
converted according to its type specifier.

::

    >>> pair = pat.compile('{kind}_{src:d}_{dst:d}.camt')
    >>> pair.format(kind='P', src=0, dst=1)
    'P_0_1.camt'
    >>> pair.parse('P_0_1.camt')
    {'kind': 'P', 'src': 0, 'dst': 1}

Fields without a type parse as a run of letters, digits and dashes, so they
never swallow the separators used in cameo's templates.
'''
__all__ = ['START', 'END', 'BOTH', 'ANY', 'Template', 'compile', 'parse']

import re
import string

START = 0
END = 1
BOTH = 2
ANY = 3


class Template(object):
    '''Wraps a template string to provide parse functionality.

    Arguments:
        string (str): Python format string

    Attributes:
        fields (list): names of the template's fields in order
        regex (str): regex used to parse strings
    '''

    default_regex = '[A-Za-z0-9-]+'
    type_regex_map = {
        'd': '[-+]?\\d+',
        'f': '[-+]?\\d*\\.?\\d+(?:[eE][-+]?\\d+)?',
        'g': '[-+]?(?:inf|nan|\\d*\\.?\\d+(?:[eE][-+]?\\d+)?)',
    }
    type_map = {
        'd': int,
        'f': float,
        'g': float,
    }
    formatter = string.Formatter()

    def __init__(self, string):
        self.string = string
        self.parsed_fields = self._parse_string(string)
        self.regex = self._to_regex(self.parsed_fields)
        self.fields = [f[0] for f in self.parsed_fields]

    def __repr__(self):
        return 'Template({!r})'.format(self.string)

    def _parse_string(self, string):
        fields = []
        counts = {}
        for literal, field, spec, conv in self.formatter.parse(string):
            if field is None:
                fields.append((None, None, re.escape(literal), None))
                continue
            if not field or field.isdigit():
                raise ValueError('Templates only support named fields.')

            typ_char = spec[-1] if spec else None
            group = '{}{}'.format(field, counts.get(field, 0))
            counts[field] = counts.get(field, 0) + 1
            regex = '(?P<{}>{})'.format(
                group,
                self.type_regex_map.get(typ_char, self.default_regex),
            )
            if literal:
                fields.append((None, None, re.escape(literal), None))
            fields.append((field, group, regex, self.type_map.get(typ_char)))
        return fields

    def _to_regex(self, fields):
        return ''.join(regex for _, _, regex, _ in fields)

    def format(self, **kwargs):
        '''Format this template, see str.format.'''

        return self.string.format(**kwargs)

    def parse(self, string, anchor=BOTH):
        '''Parse a string using this template.

        Arguments:
            string (str): String to parse
            anchor (int): START, END, BOTH or ANY

        Returns:
            dict of field values or None when the string does not match
        '''

        regex = self.regex
        if anchor in (START, BOTH):
            regex = '^' + regex
        if anchor in (END, BOTH):
            regex = regex + '$'

        match = re.search(regex, string)
        if not match:
            return

        data = {}
        for field, group, _, typ in self.parsed_fields:
            if field is None:
                continue
            value = match.group(group)
            if typ:
                value = typ(value)
            if field in data and data[field] != value:
                return
            data[field] = value
        return data


def compile(string, cache={}):
    '''Creates and caches a Template object.'''

    if string not in cache:
        cache[string] = Template(string)
    return cache[string]


def parse(string, template, anchor=BOTH):
    '''Parse a string using a template string or Template.'''

    if not isinstance(template, Template):
        template = compile(template)
    return template.parse(string, anchor)
